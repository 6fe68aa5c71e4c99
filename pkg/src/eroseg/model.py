"""SegNetTiny, a three-layer all-convolutional per-pixel classifier, and its
SGM1 checkpoint container.

SGM1 layout::

    b"SGM1" | entry count (u32 LE) | entries...
    entry := name length (u32 LE) | UTF-8 name | SGT1 tensor

Parameters are stored under ``conv{1,2,3}.{weight,bias}``; metadata under
``meta.*`` as uint32 tensors.
"""

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from . import sgt
from .data import Prng
from .errors import FormatError, ShapeError, ValidationError

HIDDEN = 16
IN_CHANNELS = 3
PARAM_NAMES = (
    "conv1.weight", "conv1.bias",
    "conv2.weight", "conv2.bias",
    "conv3.weight", "conv3.bias",
)
MAGIC = b"SGM1"

# images are mapped to [-1, 1] before the first convolution
INPUT_CENTER = 0.5
INPUT_SCALE = 2.0


@dataclass
class SegNetTiny:
    num_classes: int
    params: dict                       # name -> Tensor
    seed: int = 0
    meta: dict = field(default_factory=dict)   # epochs, config_hash

    def parameters(self):
        return [self.params[k] for k in PARAM_NAMES]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def copy(self):
        params = {k: nx.Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return SegNetTiny(self.num_classes, params, self.seed, dict(self.meta))

    def checksum(self):
        """SHA-256 over the parameter bytes in canonical order."""
        h = hashlib.sha256()
        for k in PARAM_NAMES:
            h.update(self.params[k].data.astype("<f8").tobytes())
        return h.hexdigest()


def _shapes(num_classes, hidden=HIDDEN):
    return {
        "conv1.weight": (hidden, IN_CHANNELS, 3, 3), "conv1.bias": (hidden,),
        "conv2.weight": (hidden, hidden, 3, 3), "conv2.bias": (hidden,),
        "conv3.weight": (num_classes, hidden, 3, 3), "conv3.bias": (num_classes,),
    }


def init_model(seed, num_classes, hidden=HIDDEN):
    """Weights uniform in [-1, 1) / sqrt(fan_in), biases zero.

    Kernels are drawn from ``Prng(seed)`` in the order conv1, conv2, conv3,
    each in row-major order.
    """
    if num_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {num_classes}")
    rng = Prng(seed)
    params = {}
    for name, shape in _shapes(num_classes, hidden).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = shape[1] * 9
            u = rng.uniform_block(int(np.prod(shape))).reshape(shape)
            data = (2.0 * u - 1.0) / np.sqrt(fan_in)
        params[name] = nx.Tensor(data, requires_grad=True)
    return SegNetTiny(num_classes, params, seed=seed)


def forward(model, images, grad_params=True):
    """Logits (N, C, H, W) for images (N, 3, H, W) with values in [0, 1].

    ``images`` may be an array or a Tensor (pass a Tensor with
    ``requires_grad`` to get input gradients). With ``grad_params=False`` the
    parameters enter the graph as constants.
    """
    x = images if isinstance(images, nx.Tensor) else nx.Tensor(images)
    if x.data.ndim != 4 or x.data.shape[1] != IN_CHANNELS:
        raise ShapeError(f"images must be (N, {IN_CHANNELS}, H, W), got dims {x.dims}")
    p = model.params if grad_params else {k: nx.Tensor(v.data) for k, v in model.params.items()}
    x = nx.scale(nx.add(x, nx.Tensor(np.full(x.shape, -INPUT_CENTER))), INPUT_SCALE)
    h = nx.relu(nx.conv2d(x, p["conv1.weight"], p["conv1.bias"]))
    h = nx.relu(nx.conv2d(h, p["conv2.weight"], p["conv2.bias"]))
    return nx.conv2d(h, p["conv3.weight"], p["conv3.bias"])


def predict_labels(model, images):
    logits = forward(model, images, grad_params=False).data
    return logits.argmax(axis=1).astype(np.uint32)


def _u32(value):
    return np.asarray(value, dtype=np.uint32)


def _meta_entries(model):
    seed = int(model.seed) & ((1 << 64) - 1)
    digest = bytes.fromhex(model.meta.get("config_hash", "") or "0" * 64)
    return {
        "meta.num_classes": _u32(model.num_classes),
        "meta.seed": _u32([seed >> 32, seed & 0xFFFFFFFF]),
        "meta.epochs": _u32(model.meta.get("epochs", 0)),
        "meta.config_hash": np.frombuffer(digest, dtype=">u4").astype(np.uint32),
    }


def encode_checkpoint(model):
    entries = {k: model.params[k].data for k in PARAM_NAMES}
    entries.update(_meta_entries(model))
    out = [MAGIC, struct.pack("<I", len(entries))]
    for name, array in entries.items():
        raw = name.encode("utf-8")
        out += [struct.pack("<I", len(raw)), raw, sgt.encode(array)]
    return b"".join(out)


def decode_checkpoint(buf):
    if len(buf) < 8:
        raise FormatError("truncated SGM1 header", 0)
    if buf[:4] != MAGIC:
        raise FormatError("bad magic, expected b'SGM1'", 0)
    (count,) = struct.unpack_from("<I", buf, 4)
    pos = 8
    entries = {}
    for i in range(count):
        label = f"#{i}"
        if len(buf) - pos < 4:
            raise FormatError("truncated entry name length", pos, label)
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        if len(buf) - pos < nlen:
            raise FormatError("truncated entry name", pos, label)
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("entry name is not UTF-8", pos, label)
        pos += nlen
        entries[name], pos = sgt.decode_from(buf, pos, entry=name)
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)

    missing = [k for k in PARAM_NAMES + ("meta.num_classes",) if k not in entries]
    if missing:
        raise FormatError(f"checkpoint lacks entries {missing}")
    num_classes = int(entries["meta.num_classes"])
    expected = _shapes(num_classes, entries["conv1.weight"].shape[0])
    params = {}
    for name in PARAM_NAMES:
        arr = entries[name]
        if arr.dtype != np.float64 or arr.shape != expected[name]:
            raise FormatError(
                f"parameter has dtype {arr.dtype} dims {list(arr.shape)}, "
                f"expected float64 {list(expected[name])}", entry=name,
            )
        params[name] = nx.Tensor(arr, requires_grad=True)
    seed = 0
    if "meta.seed" in entries:
        hi, lo = (int(v) for v in entries["meta.seed"])
        seed = (hi << 32) | lo
    meta = {}
    if "meta.epochs" in entries:
        meta["epochs"] = int(entries["meta.epochs"])
    if "meta.config_hash" in entries:
        meta["config_hash"] = entries["meta.config_hash"].astype(">u4").tobytes().hex()
    return SegNetTiny(num_classes, params, seed=seed, meta=meta)


def save_checkpoint(model, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(model))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
