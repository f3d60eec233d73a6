"""Dense tensors, a reverse-mode autodiff tape, Adam, and checkpoint I/O.

Tensors wrap contiguous numpy arrays (float64 for verification, float32 on
the training path). Every primitive below registers a backward rule on the
active tape; Tape.backward replays the rules in reverse, visiting each
recorded operation exactly once. Parameters whose value never reaches the
loss keep a gradient of exactly zero.

Tensors are treated as immutable once created. The single documented
exception is the optimizer, which updates parameter .data in place on the
training thread.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from gns import backend
from gns.errors import DimensionError, FormatError, ScatterIndexError, TrainingError

_ACTIVE_TAPE = None


class Tensor:
    """A dense array plus autodiff bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_grad_owned")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._grad_owned = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        grad = ", grad" if self.requires_grad else ""
        name = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{grad}{name})"


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, name=None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


class Tape:
    """Ordered record of executed primitives, replayed in reverse for grads."""

    def __init__(self):
        self._entries = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TrainingError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._entries)

    def record(self, rule) -> None:
        self._entries.append(rule)

    def backward(self, loss: Tensor) -> None:
        """Seeds d(loss)/d(loss)=1 and accumulates grads into .grad fields.

        Entries are consumed: the tape is empty afterwards.
        """
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        entries = self._entries
        self._entries = []
        for rule in reversed(entries):
            rule()


def _recording(*tensors):
    return _ACTIVE_TAPE is not None and any(t.requires_grad for t in tensors)


def _accumulate(t: Tensor, g: np.ndarray, fresh: bool) -> None:
    # `fresh` marks grads the rule allocated itself. Aliased/view grads are
    # stored as-is, but the first further contribution switches to an
    # out-of-place add so shared buffers are never mutated.
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
        t._grad_owned = fresh
    elif t._grad_owned:
        t.grad += g
    else:
        t.grad = t.grad + g
        t._grad_owned = True


def zero_grads(params) -> None:
    for t in params.values() if isinstance(params, dict) else params:
        t.grad = None
        t._grad_owned = False


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)
    if _recording(a, b):
        out.requires_grad = True

        def rule():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g @ b.data.T, fresh=True)
            _accumulate(b, a.data.T @ g, fresh=True)

        _ACTIVE_TAPE.record(rule)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also supports broadcasting a row vector (d,) over (n, d)."""
    bias_like = a.data.ndim == 2 and b.data.ndim == 1 and a.shape[1] == b.shape[0]
    if not bias_like and a.shape != b.shape:
        raise DimensionError(f"add shapes incompatible: {a.shape} + {b.shape}")
    out = Tensor(a.data + b.data)
    if _recording(a, b):
        out.requires_grad = True

        def rule():
            g = out.grad
            if g is None:
                return
            _accumulate(a, g, fresh=False)
            _accumulate(b, g.sum(axis=0) if bias_like else g, fresh=bias_like)

        _ACTIVE_TAPE.record(rule)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    if _recording(x):
        out.requires_grad = True
        # subgradient 0 at exactly 0; mask kept in x's dtype so the backward
        # multiply stays in-kind
        positive = (x.data > 0).astype(x.dtype)

        def rule():
            g = out.grad
            if g is None:
                return
            _accumulate(x, g * positive, fresh=True)

        _ACTIVE_TAPE.record(rule)
    return out


LAYER_NORM_EPS = 1e-6


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalization over the feature axis, then affine gain/bias."""
    if x.data.ndim != 2:
        raise DimensionError(f"layer_norm expects a 2-d input, got {x.shape}")
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match width {x.shape[1]}")
    width = x.shape[1]
    mu = x.data.mean(axis=1)
    centered = x.data - mu[:, None]
    var = np.einsum("ij,ij->i", centered, centered) / width
    inv = (1.0 / np.sqrt(var + eps))[:, None]
    xhat = centered * inv
    out = Tensor(xhat * gain.data + bias.data)
    if _recording(x, gain, bias):
        out.requires_grad = True

        def rule():
            g = out.grad
            if g is None:
                return
            gx = g * gain.data
            mean_gx = gx.mean(axis=1)[:, None]
            mean_gx_xhat = (np.einsum("ij,ij->i", gx, xhat) / width)[:, None]
            _accumulate(x, inv * (gx - mean_gx - xhat * mean_gx_xhat), fresh=True)
            _accumulate(gain, np.einsum("ij,ij->j", g, xhat), fresh=True)
            _accumulate(bias, g.sum(axis=0), fresh=True)

        _ACTIVE_TAPE.record(rule)
    return out


def _check_index(index: np.ndarray, n: int, what: str) -> np.ndarray:
    index = np.ascontiguousarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ScatterIndexError(
            f"{what} index out of range [0, {n}): min={index.min()}, max={index.max()}")
    return index


def scatter_sum(src: Tensor, index, n: int) -> Tensor:
    """Row i of the result is the sum of src rows whose index equals i."""
    if src.data.ndim != 2:
        raise DimensionError(f"scatter_sum expects a 2-d src, got {src.shape}")
    index = _check_index(index, n, "scatter_sum")
    if index.shape[0] != src.shape[0]:
        raise DimensionError(
            f"scatter_sum got {src.shape[0]} rows but {index.shape[0]} indices")
    out_data = np.zeros((n, src.shape[1]), dtype=src.dtype)
    backend.scatter_sum(src.data, index, out_data)
    out = Tensor(out_data)
    if _recording(src):
        out.requires_grad = True

        def rule():
            g = out.grad
            if g is None:
                return
            _accumulate(src, g[index], fresh=True)

        _ACTIVE_TAPE.record(rule)
    return out


def gather_rows(src: Tensor, index) -> Tensor:
    """Row e of the result is src[index[e]]; the adjoint of scatter_sum."""
    if src.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-d src, got {src.shape}")
    index = _check_index(index, src.shape[0], "gather_rows")
    out = Tensor(src.data[index] if index.size else
                 np.empty((0, src.shape[1]), dtype=src.dtype))
    if _recording(src):
        out.requires_grad = True

        def rule():
            g = out.grad
            if g is None:
                return
            acc = np.zeros(src.shape, dtype=g.dtype)
            backend.scatter_sum(np.ascontiguousarray(g), index, acc)
            _accumulate(src, acc, fresh=True)

        _ACTIVE_TAPE.record(rule)
    return out


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    if _recording(*tensors):
        out.requires_grad = True
        sizes = [t.shape[axis] for t in tensors]

        def rule():
            g = out.grad
            if g is None:
                return
            offset = 0
            for t, size in zip(tensors, sizes):
                piece = g[offset:offset + size] if axis == 0 else g[:, offset:offset + size]
                _accumulate(t, piece, fresh=False)
                offset += size

        _ACTIVE_TAPE.record(rule)
    return out


def mean(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean()))
    if _recording(x):
        out.requires_grad = True
        scale = 1.0 / x.data.size

        def rule():
            g = out.grad
            if g is None:
                return
            _accumulate(x, np.full(x.shape, g * scale, dtype=x.dtype), fresh=True)

        _ACTIVE_TAPE.record(rule)
    return out


def mse_loss(pred: Tensor, target: Tensor, mask=None) -> Tensor:
    """Mean squared difference over all elements of the selected rows.

    mask is an optional boolean row selector; rows where it is False
    contribute neither loss nor gradient. With no selected rows the loss
    is exactly zero.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (pred.shape[0],):
            raise DimensionError(
                f"mse_loss mask shape {mask.shape} does not match {pred.shape[0]} rows")
        diff = diff * mask[:, None]
        count = int(mask.sum()) * int(np.prod(pred.shape[1:], dtype=np.int64))
    else:
        count = diff.size
    if count == 0:
        out = Tensor(np.zeros((), dtype=pred.dtype))
        return out
    out = Tensor(np.asarray((diff * diff).sum() / count))
    if _recording(pred, target):
        out.requires_grad = True

        def rule():
            g = out.grad
            if g is None:
                return
            scaled = diff * (2.0 * g / count)
            _accumulate(pred, scaled, fresh=True)
            _accumulate(target, -scaled, fresh=True)

        _ACTIVE_TAPE.record(rule)
    return out


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment accumulators per parameter plus a step counter."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place on the parameter data.

    Missing or None grads are treated as exactly zero.
    """
    if lr <= 0:
        raise TrainingError(f"learning rate must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, p in params.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        g = grads.get(name)
        if g is None:
            m *= b1
            v *= b2
        else:
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter '{name}'")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
        p.data -= (lr / corr1) * m / (np.sqrt(v / corr2) + state.eps)


# ---------------------------------------------------------------------------
# Checkpoint format
#
# magic (8 bytes) | version u32 LE | manifest length u32 LE | manifest JSON
# | crc32 of manifest u32 LE | raw little-endian payloads in manifest order.
# Each manifest entry: {"name", "shape", "count", "dtype"}. Model parameters
# and Adam moments are stored as 32-bit reals ("f4"); reserved internal
# entries may use "f8"/"i8" (normalization sums, step counter) so resumed
# training replays bit-exactly.

CHECKPOINT_MAGIC = b"GNSCKPT\x00"
CHECKPOINT_VERSION = 1

ADAM_M_PREFIX = "__adam_m__/"
ADAM_V_PREFIX = "__adam_v__/"
ADAM_STEP_NAME = "__adam_step__"
RESERVED_PREFIX = "__"

_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8"), "i8": np.dtype("<i8")}


def _dtype_code(arr: np.ndarray) -> str:
    kind = arr.dtype.kind
    if kind == "f":
        return "f8" if arr.dtype.itemsize == 8 else "f4"
    if kind in "iu":
        return "i8"
    raise FormatError(f"unsupported checkpoint dtype {arr.dtype}")


def save_checkpoint(path, entries) -> None:
    """Writes named arrays; iteration order of `entries` fixes payload order."""
    manifest = []
    payloads = []
    for name, arr in entries.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        manifest.append({
            "name": name,
            "shape": list(arr.shape),
            "count": int(arr.size),
            "dtype": code,
        })
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    blob = json.dumps({"entries": manifest}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", zlib.crc32(blob)))
        for chunk in payloads:
            fh.write(chunk)


def load_checkpoint(path):
    """Reads a checkpoint back into a dict of name -> array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", offset=0)
    if len(raw) < 16:
        raise FormatError("truncated checkpoint header", offset=len(raw))
    version, blob_len = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    blob_end = 16 + blob_len
    if len(raw) < blob_end + 4:
        raise FormatError("truncated checkpoint manifest", offset=len(raw))
    blob = raw[16:blob_end]
    (crc,) = struct.unpack_from("<I", raw, blob_end)
    if crc != zlib.crc32(blob):
        raise FormatError("checkpoint manifest checksum mismatch", offset=blob_end)
    manifest = json.loads(blob.decode("utf-8"))["entries"]
    out = {}
    offset = blob_end + 4
    for entry in manifest:
        dtype = _DTYPES[entry["dtype"]]
        nbytes = entry["count"] * dtype.itemsize
        if len(raw) < offset + nbytes:
            raise FormatError(
                f"truncated payload for '{entry['name']}': expected {nbytes} bytes",
                offset=offset)
        arr = np.frombuffer(raw, dtype=dtype, count=entry["count"], offset=offset)
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += nbytes
    return out


def adam_entries(state: AdamState):
    """Flattens an AdamState into reserved checkpoint entries."""
    out = {ADAM_STEP_NAME: np.asarray([state.step], dtype=np.int64)}
    for name, m in state.m.items():
        out[ADAM_M_PREFIX + name] = m
        out[ADAM_V_PREFIX + name] = state.v[name]
    return out


def adam_from_entries(entries, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
    state.step = int(entries[ADAM_STEP_NAME][0])
    for name, arr in entries.items():
        if name.startswith(ADAM_M_PREFIX):
            state.m[name[len(ADAM_M_PREFIX):]] = arr.copy()
        elif name.startswith(ADAM_V_PREFIX):
            state.v[name[len(ADAM_V_PREFIX):]] = arr.copy()
    return state
