"""EroSeg and PGD: l-infinity sign-gradient attacks on segmentation inputs.

EroSeg attacks only the "sensitive" pixels at each iteration: those still
classified correctly whose top-class probability is below a threshold that
rises towards 1 as the attack proceeds,

    tau_t = 1 - (1 - tau0) exp(-beta t),

so the attack starts on fragile pixels and spreads to confident ones. The
per-pixel cross-entropy is weighted by ``lambda_fg`` on foreground
(label != 0) and ``1 - lambda_fg`` on background, masked, and normalised by
the total pixel count N*H*W.

The mask is recomputed on the current adversarial example every iteration,
so pixels that have already flipped drop out.
"""

import math
import numbers
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from . import numerics as nx
from .data import Prng
from .errors import ShapeError, ValidationError
from .model import forward

MASK_MODES = ("eroseg", "all", "foreground", "background", "conf-eq-1", "conf-lt-1")
INIT_MODES = ("zero", "uniform")
CONF_ONE = 1.0 - 1e-9


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 0.001
    iters: int = 10
    tau0: float = 0.8
    beta: float = 0.8
    lambda_fg: float = 0.7
    init: str = "uniform"
    mask_mode: str = "eroseg"
    seed: int = 0

    def validate(self):
        # epsilon = 0 and alpha = 0 are accepted: both are used as
        # degenerate "no attack" settings.
        problems = []
        if not 0 <= self.epsilon <= 1:
            problems.append(f"epsilon={self.epsilon} not in [0, 1]")
        if not self.alpha >= 0:
            problems.append(f"alpha={self.alpha} must be >= 0")
        if int(self.iters) != self.iters or self.iters < 1:
            problems.append(f"iters={self.iters} must be an integer >= 1")
        if not 0 < self.tau0 < 1:
            problems.append(f"tau0={self.tau0} not in (0, 1)")
        if not self.beta > 0:
            problems.append(f"beta={self.beta} must be > 0")
        if not 0 <= self.lambda_fg <= 1:
            problems.append(f"lambda_fg={self.lambda_fg} not in [0, 1]")
        if self.init not in INIT_MODES:
            problems.append(f"init={self.init!r} not one of {INIT_MODES}")
        if self.mask_mode not in MASK_MODES:
            problems.append(f"mask_mode={self.mask_mode!r} not one of {MASK_MODES}")
        if problems:
            raise ValidationError("invalid attack config: " + "; ".join(problems))
        return self

    def replace(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        return asdict(self)


@dataclass
class AttackTrace:
    """Per-iteration record. ``confusion[t]`` is the confusion matrix of the
    prediction on the input fed to iteration t, before its update."""

    tau: list = field(default_factory=list)
    mask_density: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    confusion: list = field(default_factory=list)
    pixels: int = 0

    @property
    def miou(self):
        return [metrics.miou(cm) for cm in self.confusion]

    def __len__(self):
        return len(self.tau)

    def csv_lines(self):
        lines = ["t,tau_t,mask_density,loss,miou"]
        for t, row in enumerate(zip(self.tau, self.mask_density, self.loss, self.miou)):
            lines.append(f"{t}," + ",".join(repr(float(v)) for v in row))
        return lines

    def write_csv(self, path):
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(self.csv_lines()) + "\n")

    @classmethod
    def merge(cls, traces):
        """Combine per-batch traces in batch order (pixel-weighted averages)."""
        traces = list(traces)
        if not traces:
            return cls()
        total = sum(t.pixels for t in traces)
        steps = len(traces[0])
        out = cls(pixels=total, tau=list(traces[0].tau))
        for i in range(steps):
            density = loss = 0.0
            cm = None
            for tr in traces:
                density += tr.mask_density[i] * tr.pixels
                loss += tr.loss[i] * tr.pixels
                cm = tr.confusion[i] if cm is None else cm + tr.confusion[i]
            out.mask_density.append(density / total)
            out.loss.append(loss / total)
            out.confusion.append(cm)
        return out


def pixel_confidence(probs):
    """Top-class probability per pixel: (N, C, H, W) -> (N, H, W)."""
    return np.asarray(probs).max(axis=1)


def predict(probs):
    """Argmax class per pixel; ties go to the lowest class index."""
    return np.asarray(probs).argmax(axis=1).astype(np.uint32)


class Threshold(float):
    """A threshold just below 1, stored by its gap ``1 - tau``.

    The float value is the rounded ``1 - gap``, which reaches 1.0 once the gap
    drops under 2**-54. Comparisons and ``1 - tau`` use the gap instead, so
    ordering stays strict and the value stays below 1 long after the float
    saturates. ``log_gap`` orders thresholds whose gap underflows to zero.
    """

    __slots__ = ("gap", "log_gap")

    def __new__(cls, gap, log_gap):
        self = super().__new__(cls, 1.0 - gap)
        self.gap, self.log_gap = gap, log_gap
        return self

    def _cmp(self, other):
        """Sign of ``self - other``, or None for non-numbers."""
        if isinstance(other, Threshold):
            a, b = other.log_gap, self.log_gap
        elif isinstance(other, numbers.Real):
            a, b = 1.0 - float(other), self.gap
            if b == 0.0:
                # the true gap is positive and smaller than any nonzero room
                return -1 if a >= 0.0 else 1
        else:
            return None
        # a larger gap means a smaller threshold
        return (a > b) - (a < b)

    def __lt__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c < 0

    def __le__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c <= 0

    def __gt__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c > 0

    def __ge__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c >= 0

    def __eq__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c == 0

    def __ne__(self, other):
        c = self._cmp(other)
        return NotImplemented if c is None else c != 0

    __hash__ = float.__hash__

    def __rsub__(self, other):
        if other == 1:
            return self.gap
        return float(other) - float(self)

    def __repr__(self):
        return repr(float(self))


def tau_schedule(tau0, beta, t):
    """``1 - (1 - tau0) exp(-beta t)`` as a :class:`Threshold`."""
    return Threshold((1.0 - tau0) * math.exp(-beta * t), math.log1p(-tau0) - beta * t)


def sensitive_mask(conf, preds, labels, tau):
    """1 where the pixel is correct and its confidence is strictly below ``tau``."""
    conf, preds, labels = np.asarray(conf), np.asarray(preds), np.asarray(labels)
    if not conf.shape == preds.shape == labels.shape:
        raise ShapeError(
            f"conf {list(conf.shape)}, preds {list(preds.shape)}, labels {list(labels.shape)} disagree"
        )
    if isinstance(tau, Threshold):
        # 1 - conf is exact for conf >= 0.5, so this is the exact test conf < tau
        below = (1.0 - conf) > tau.gap
    else:
        below = conf < tau
    return (below & (preds == labels)).astype(np.float64)


def class_weights(labels, lambda_fg):
    labels = np.asarray(labels)
    return np.where(labels != 0, lambda_fg, 1.0 - lambda_fg)


def eroseg_loss(logits, labels, mask, weights):
    """Masked, class-weighted cross-entropy averaged over all N*H*W pixels."""
    logits = logits if isinstance(logits, nx.Tensor) else nx.Tensor(logits)
    n, _, h, w = logits.data.shape
    mask, weights = np.asarray(mask, dtype=np.float64), np.asarray(weights, dtype=np.float64)
    if mask.shape != (n, h, w) or weights.shape != (n, h, w):
        raise ShapeError(
            f"mask {list(mask.shape)} / weights {list(weights.shape)} must be [{n}, {h}, {w}]"
        )
    ce = nx.pixel_cross_entropy(nx.log_softmax_channels(logits), labels)
    return nx.weighted_mean(ce, mask * weights, count=n * h * w)


def mean_cross_entropy(logits, labels):
    return nx.mean(nx.pixel_cross_entropy(nx.log_softmax_channels(logits), labels))


def attack_step(x_adv, x_clean, grad, cfg):
    """One signed ascent step, projected to the epsilon ball and to [0, 1]."""
    delta = np.clip(x_adv - x_clean + cfg.alpha * np.sign(grad), -cfg.epsilon, cfg.epsilon)
    return np.clip(x_clean + delta, 0.0, 1.0)


def _init_adv(images, cfg):
    if cfg.init == "zero" or cfg.epsilon == 0:
        return images.copy()
    u = Prng(cfg.seed).uniform_block(images.size).reshape(images.shape)
    return np.clip(images + cfg.epsilon * (2.0 * u - 1.0), 0.0, 1.0)


def attack_mask(mode, conf, preds, labels, tau):
    if mode == "eroseg":
        return sensitive_mask(conf, preds, labels, tau)
    if mode == "all":
        return np.ones(labels.shape)
    if mode == "foreground":
        return (labels != 0).astype(np.float64)
    if mode == "background":
        return (labels == 0).astype(np.float64)
    correct = preds == labels
    if mode == "conf-eq-1":
        return (correct & (conf >= CONF_ONE)).astype(np.float64)
    if mode == "conf-lt-1":
        return (correct & (conf < CONF_ONE)).astype(np.float64)
    raise ValidationError(f"unknown mask mode {mode!r}; valid: {MASK_MODES}")


def _run(model, images, labels, cfg, loss_terms, on_step=None):
    cfg.validate()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.size and (images.min() < 0 or images.max() > 1):
        raise ValidationError("attack inputs must lie in [0, 1]")
    x_adv = _init_adv(images, cfg)
    trace = AttackTrace(pixels=labels.size)
    for t in range(int(cfg.iters)):
        x = nx.Tensor(x_adv, requires_grad=True)
        logits = forward(model, x, grad_params=False)
        probs = np.exp(nx.log_softmax_channels(logits.data).data)
        conf, preds = pixel_confidence(probs), predict(probs)
        tau, mask, weights = loss_terms(t, conf, preds)
        loss = eroseg_loss(logits, labels, mask, weights)
        loss.backward()
        trace.tau.append(tau)
        trace.mask_density.append(float(mask.mean()) if mask.size else 0.0)
        trace.loss.append(loss.item())
        trace.confusion.append(metrics.accumulate(preds, labels, model.num_classes))
        x_adv = attack_step(x_adv, images, x.grad, cfg)
        if on_step is not None:
            on_step(t, x_adv)
    return x_adv, trace


def eroseg_attack(model, images, labels, cfg, on_step=None):
    """Run EroSeg; returns the adversarial images and the per-iteration trace.

    ``on_step(t, x_adv)`` is called after every update.
    """
    weights = class_weights(labels, cfg.lambda_fg)

    def terms(t, conf, preds):
        tau = tau_schedule(cfg.tau0, cfg.beta, t)
        return tau, attack_mask(cfg.mask_mode, conf, preds, labels, tau), weights

    return _run(model, images, labels, cfg, terms, on_step)


def pgd_attack(model, images, labels, cfg, on_step=None):
    """Plain PGD: unmasked, unweighted mean cross-entropy. ``tau_t`` is NaN."""
    ones = np.ones(np.shape(labels))

    def terms(t, conf, preds):
        return math.nan, ones, ones

    return _run(model, images, labels, cfg, terms, on_step)


ATTACKS = {"eroseg": eroseg_attack, "pgd": pgd_attack}


def get_attack(name):
    try:
        return ATTACKS[name]
    except KeyError:
        raise ValidationError(f"unknown attack {name!r}; valid: {sorted(ATTACKS)}") from None
