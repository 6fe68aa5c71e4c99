"""Double-precision tensors with reverse-mode automatic differentiation.

Only what the segmentation network and the attack losses need is here:
3x3 same-padded convolution, ReLU, channel log-softmax, per-pixel
cross-entropy, elementwise add/mul, and sum/mean reductions.

Every node gets a sequence number when it is created. ``backward`` replays
the nodes reachable from the root in exactly reverse creation order, so a
node's gradient is complete before it is propagated to its parents.

Reduction order is fixed: elementwise reductions use numpy's pairwise sum
over contiguous memory; convolutions are a single im2col GEMM per call, and
the input gradient is another such GEMM, never a scatter-add.
BLAS is pinned to one thread unless ``EROSEG_THREADS`` asks otherwise, which
keeps GEMM accumulation order (and so every output bit) stable across runs.
"""

import contextlib
import itertools
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover
    threadpool_limits = None


def _configure_threads():
    raw = os.environ.get("EROSEG_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"EROSEG_THREADS must be an integer, got {raw!r}")
    if threadpool_limits is not None:
        threadpool_limits(max(n, 1))
    return n


THREADS = _configure_threads()

_seq = itertools.count()
_faults = {}


@contextlib.contextmanager
def inject_fault(op, factor=2.0):
    """Scale the parameter gradient produced by ``op`` (test hook).

    Supported ops: ``"conv2d"`` (kernel gradient), ``"relu"``,
    ``"log_softmax_channels"``, ``"pixel_cross_entropy"`` (input gradients).
    """
    _faults[op] = float(factor)
    try:
        yield
    finally:
        _faults.pop(op, None)


def _fault(op, grad):
    if op in _faults:
        return grad * _faults[op]
    return grad


class Tensor:
    """An n-d float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op=""):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = tuple(_parents)
        self._backward = None
        self._seq = next(_seq)
        self.op = op

    @property
    def dims(self):
        return list(self.data.shape)

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(dims={self.dims}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has {self.data.size}")
        return float(self.data.reshape(()))

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Propagate gradients from this tensor to every contributing leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        self._accumulate(grad)
        for node in reversed(graph_nodes(self)):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar for the handful of elementwise ops we support
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


def graph_nodes(root):
    """Nodes reachable from ``root`` that need gradients, in creation order."""
    seen = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen or not node.requires_grad:
            continue
        seen[id(node)] = node
        stack.extend(node._parents)
    return sorted(seen.values(), key=lambda n: n._seq)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, op):
    return Tensor(data, requires_grad=any(p.requires_grad for p in parents),
                  _parents=parents, op=op)


def _im2col(xn):
    """(N, H, W, C) -> (N*H*W, 9*C) patches, columns ordered (di, dj, c)."""
    n, h, w, c = xn.shape
    xp = np.pad(xn, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, 9 * c)


def conv2d(input, kernel, bias):
    """3x3 cross-correlation with zero padding 1, plus a per-channel bias.

    ``input`` is (N, Cin, H, W), ``kernel`` (Cout, Cin, 3, 3), ``bias`` (Cout,).
    Internally channels-last: one GEMM of the im2col patch matrix with the
    kernel. The input gradient is the same kind of GEMM on the padded output
    gradient against the spatially flipped, channel-transposed kernel.
    """
    input, kernel, bias = _as_tensor(input), _as_tensor(kernel), _as_tensor(bias)
    x, k, b = input.data, kernel.data, bias.data
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-d (N,C,H,W), got dims {list(x.shape)}")
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be (Cout,Cin,3,3), got {list(k.shape)}")
    n, cin, h, w = x.shape
    cout = k.shape[0]
    if k.shape[1] != cin:
        raise ShapeError(f"kernel expects {k.shape[1]} input channels, input has {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"bias must have dims [{cout}], got {list(b.shape)}")

    cols = _im2col(x.transpose(0, 2, 3, 1))
    kmat = np.ascontiguousarray(k.transpose(0, 2, 3, 1)).reshape(cout, 9 * cin)
    out = cols @ kmat.T
    out += b
    result = _result(out.reshape(n, h, w, cout).transpose(0, 3, 1, 2), (input, kernel, bias), "conv2d")

    def _backward(g):
        gn = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = gn.reshape(n * h * w, cout)
        if kernel.requires_grad:
            dk = (g2.T @ cols).reshape(cout, 3, 3, cin).transpose(0, 3, 1, 2)
            kernel._accumulate(_fault("conv2d", dk))
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if input.requires_grad:
            flipped = np.ascontiguousarray(k[:, :, ::-1, ::-1].transpose(2, 3, 0, 1))
            dx = _im2col(gn) @ flipped.reshape(9 * cout, cin)
            input._accumulate(dx.reshape(n, h, w, cin).transpose(0, 3, 1, 2))

    result._backward = _backward
    return result


def relu(input):
    """Elementwise max(0, v); the subgradient at exactly 0 is 0."""
    input = _as_tensor(input)
    active = input.data > 0
    result = _result(np.where(active, input.data, 0.0), (input,), "relu")

    def _backward(g):
        input._accumulate(_fault("relu", np.where(active, g, 0.0)))

    result._backward = _backward
    return result


def log_softmax_channels(logits):
    """Log-softmax over axis 1 of an (N, C, H, W) tensor, max-subtracted."""
    logits = _as_tensor(logits)
    z = logits.data
    if z.ndim != 4:
        raise ShapeError(f"expected (N,C,H,W) logits, got dims {list(z.shape)}")
    if z.shape[1] < 2:
        raise ShapeError("log_softmax_channels needs at least 2 channels")
    shifted = z - z.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    result = _result(out, (logits,), "log_softmax_channels")

    def _backward(g):
        grad = g - np.exp(out) * g.sum(axis=1, keepdims=True)
        logits._accumulate(_fault("log_softmax_channels", grad))

    result._backward = _backward
    return result


def pixel_cross_entropy(log_probs, labels):
    """Per-pixel ``-log p[label]`` as an (N, H, W) tensor; no reduction."""
    log_probs = _as_tensor(log_probs)
    lp = log_probs.data
    labels = np.asarray(labels)
    if lp.ndim != 4:
        raise ShapeError(f"expected (N,C,H,W) log-probs, got dims {list(lp.shape)}")
    n, c, h, w = lp.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels dims {list(labels.shape)} do not match [{n}, {h}, {w}]")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValidationError(
            f"label values must lie in [0, {c - 1}], found range "
            f"[{labels.min()}, {labels.max()}]"
        )
    idx = labels.astype(np.intp)[:, None]
    out = -np.take_along_axis(lp, idx, axis=1)[:, 0]
    result = _result(out, (log_probs,), "pixel_cross_entropy")

    def _backward(g):
        grad = np.zeros_like(lp)
        np.put_along_axis(grad, idx, -g[:, None], axis=1)
        log_probs._accumulate(_fault("pixel_cross_entropy", grad))

    result._backward = _backward
    return result


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: dims {list(a.shape)} and {list(b.shape)} differ")


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a.data, b.data, "add")
    result = _result(a.data + b.data, (a, b), "add")

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    result._backward = _backward
    return result


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a.data, b.data, "mul")
    result = _result(a.data * b.data, (a, b), "mul")

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    result._backward = _backward
    return result


def scale(a, factor):
    """Multiply by a python/numpy scalar constant."""
    a = _as_tensor(a)
    factor = float(factor)
    result = _result(a.data * factor, (a,), "scale")

    def _backward(g):
        a._accumulate(g * factor)

    result._backward = _backward
    return result


def total(a):
    """Sum of all elements, as a 0-d tensor."""
    a = _as_tensor(a)
    result = _result(np.sum(a.data), (a,), "sum")

    def _backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape))

    result._backward = _backward
    return result


def mean(a):
    a = _as_tensor(a)
    return scale(total(a), 1.0 / a.data.size)


def weighted_mean(values, weights, count=None):
    """``sum(values * weights) / count``; ``count`` defaults to ``values.size``.

    ``weights`` is a constant array. The denominator does not depend on how
    many weights are zero.
    """
    values = _as_tensor(values)
    weights = np.asarray(weights, dtype=np.float64)
    _check_same(values.data, weights, "weighted_mean")
    count = values.data.size if count is None else count
    return scale(total(mul(values, Tensor(weights))), 1.0 / count)


def grad_check(fn, params, h=1e-6, max_entries=None, seed=0):
    """Largest relative error between autodiff and central differences.

    ``fn`` takes no arguments and rebuilds a scalar graph from the current
    contents of ``params`` (a sequence of leaf tensors). For each parameter the
    error is ``|g_auto - g_fd| / max(1e-12, |g_fd|)`` using Euclidean norms over
    the checked entries. With ``max_entries`` set, at most that many entries per
    parameter are probed, chosen by a seeded generator.
    """
    if h <= 0:
        raise ValidationError("finite-difference step h must be positive")
    params = list(params)
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    out = fn()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValidationError("grad_check needs fn to return a scalar Tensor")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        auto = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = fn().item()
            flat[i] = orig - h
            down = fn().item()
            flat[i] = orig
            numeric[j] = (up - down) / (2 * h)
        diff = np.linalg.norm(auto.reshape(-1)[idx] - numeric)
        worst = max(worst, diff / max(1e-12, np.linalg.norm(numeric)))
    return worst
