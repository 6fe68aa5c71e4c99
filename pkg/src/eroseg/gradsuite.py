"""Randomised finite-difference checks over every differentiable piece.

Each instance draws fresh shapes and values from ``numpy.random.default_rng``
and checks six cases: a convolution (input, kernel and bias), ReLU, channel
log-softmax, pixel cross-entropy, the whole network's parameter gradient, and
the masked attack loss with respect to the input image.
"""

import numpy as np

from . import numerics as nx
from .attacks import class_weights, eroseg_loss, mean_cross_entropy
from .model import INPUT_CENTER, INPUT_SCALE, forward, init_model

TOLERANCE = 1e-6
# Network instances are redrawn until every hidden pre-activation is at least
# this far from the ReLU kink, where central differences are meaningless.
KINK_MARGIN = 1e-4
CASES = ("conv2d", "relu", "log_softmax_channels", "pixel_cross_entropy", "model", "eroseg_loss")


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, margin * np.sign(x) + margin * (x == 0), x)


def _min_preactivation(model, images):
    p = {k: v.data for k, v in model.params.items()}
    h = nx.Tensor((images - INPUT_CENTER) * INPUT_SCALE)
    lowest = np.inf
    for layer in ("conv1", "conv2"):
        pre = nx.conv2d(h, nx.Tensor(p[layer + ".weight"]), nx.Tensor(p[layer + ".bias"]))
        lowest = min(lowest, float(np.abs(pre.data).min()))
        h = nx.relu(pre)
    return lowest


def _smooth_network(rng, c, shape):
    while True:
        model = init_model(int(rng.integers(0, 2 ** 32)), c)
        images = rng.random(shape)
        if _min_preactivation(model, images) > KINK_MARGIN:
            return model, images


def _case(name, rng):
    """Return ``(fn, params, max_entries)`` for one random instance."""
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
    c = int(rng.integers(2, 5))
    if name == "conv2d":
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        x = nx.Tensor(rng.normal(size=(n, cin, h, w)))
        k = nx.Tensor(rng.normal(size=(cout, cin, 3, 3)))
        b = nx.Tensor(rng.normal(size=(cout,)))
        r = nx.Tensor(rng.normal(size=(n, cout, h, w)))
        return (lambda: nx.total(nx.mul(nx.conv2d(x, k, b), r))), [x, k, b], None
    if name == "relu":
        x = nx.Tensor(_away_from_zero(rng, (n, c, h, w)))
        r = nx.Tensor(rng.normal(size=(n, c, h, w)))
        return (lambda: nx.total(nx.mul(nx.relu(x), r))), [x], None
    if name == "log_softmax_channels":
        x = nx.Tensor(rng.normal(size=(n, c, h, w)) * 3)
        r = nx.Tensor(rng.normal(size=(n, c, h, w)))
        return (lambda: nx.total(nx.mul(nx.log_softmax_channels(x), r))), [x], None
    labels = rng.integers(0, c, (n, h, w))
    if name == "pixel_cross_entropy":
        lp = nx.Tensor(rng.normal(size=(n, c, h, w)))
        return (lambda: nx.mean(nx.pixel_cross_entropy(lp, labels))), [lp], None
    model, images = _smooth_network(rng, c, (n, 3, h, w))
    if name == "model":
        return (lambda: mean_cross_entropy(forward(model, images), labels)), model.parameters(), 12
    if name == "eroseg_loss":
        x = nx.Tensor(images)
        mask = (rng.random((n, h, w)) < 0.6).astype(float)
        weights = class_weights(labels, float(rng.random()))
        fn = lambda: eroseg_loss(forward(model, x, grad_params=False), labels, mask, weights)  # noqa: E731
        return fn, [x], None
    raise ValueError(f"unknown case {name!r}")


def run(instances=100, seed=0):
    """Maximum relative error per case over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {name: 0.0 for name in CASES}
    for _ in range(instances):
        for name in CASES:
            fn, params, limit = _case(name, rng)
            err = nx.grad_check(fn, params, max_entries=limit, seed=int(rng.integers(0, 2 ** 31)))
            worst[name] = max(worst[name], float(err))
    return worst


def passed(report, tolerance=TOLERANCE):
    return all(v < tolerance for v in report.values())
