"""Reverse-mode automatic differentiation over dense float32 tensors.

Exactly the primitives the part-prototype model needs: 2-d convolution,
ReLU/tanh nonlinearities, per-channel instance normalisation, channel
softmax, spatial max pooling, matrix product, elementwise arithmetic and
reductions. Values are stored as float32; scalar reductions and
normalisation statistics accumulate in float64.

Gradients are recorded on an explicit tape::

    with record():
        loss = mean_all(mul(x, x))
        backward(loss)

Gradient accumulation is additive; call ``zero_grads`` between steps.
A tape is confined to one thread. Tensors are safe to share across
threads once they stop being mutated.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "record", "backward", "zero_grads",
    "add", "sub", "mul", "neg", "add_scalar", "mul_scalar",
    "matmul", "conv2d", "relu", "tanh", "log", "log1p",
    "instance_norm", "softmax_channel", "spatial_max_pool",
    "sum_all", "mean_all", "sum_batch", "channel_dot", "flip_w",
    "align_agreement", "cross_entropy_logits",
    "save_tensor", "load_tensor",
]


class Tensor:
    """Dense float32 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar. Tensor-tensor ops require identical shapes; the
    # only broadcasting allowed anywhere is scalar-tensor.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class _Node:
    """One recorded primitive: inputs, output, and its vector-Jacobian rule."""

    __slots__ = ("inputs", "out", "backward_fn")

    def __init__(self, inputs: Sequence[Tensor], out: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.inputs = tuple(inputs)
        self.out = out
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitives; consumed by one backward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def record() -> Tape:
    """Open a fresh gradient tape (use as a context manager)."""
    return Tape()


def _emit(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    """Wrap an op result, recording it when a tape is active and needed."""
    out = Tensor(out_data)
    stack = _tape_stack()
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        stack[-1].nodes.append(_Node(inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into .grad for every tensor on the path.

    The loss must be a scalar produced under the active tape. The tape is
    consumed: its node list is cleared after the walk.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    stack = _tape_stack()
    if not stack:
        raise RuntimeError("backward called with no active tape; wrap the forward pass in record()")
    tape = stack[-1]
    if not any(n.out is loss for n in tape.nodes):
        raise RuntimeError("loss is not connected to the active tape")

    _accumulate(loss, np.ones_like(loss.data))
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for t, gt in zip(node.inputs, grads):
            if gt is not None and t.requires_grad:
                _accumulate(t, gt)
    tape.nodes.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32, copy=True)
    else:
        t.grad += g


def zero_grads(tensors: Sequence[Tensor]) -> None:
    """Drop accumulated gradients before the next step."""
    for t in tensors:
        t.grad = None


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _emit([a, b], a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _emit([a, b], a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit([a, b], ad * bd, lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _emit([a], -a.data, lambda g: (-g,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit([a], a.data + np.float32(c), lambda g: (g,))


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)
    return _emit([a], a.data * c32, lambda g: (g * c32,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit([a], np.where(mask, a.data, np.float32(0)), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit([a], y, lambda g: (g * (1.0 - y * y),))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _emit([a], np.log(ad), lambda g: (g / ad,))


def log1p(a: Tensor) -> Tensor:
    ad = a.data
    return _emit([a], np.log1p(ad), lambda g: (g / (1.0 + ad),))


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    ad, bd = a.data, b.data
    return _emit([a, b], ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    n, c, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, c, kh, kw, oh, ow),
        (s0, s1, s2, s3, s2 * stride, s3 * stride), writeable=False)
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3))
    return cols.reshape(n * oh * ow, c * kh * kw), oh, ow


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with kernels (Cout,Cin,kh,kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError(f"conv2d: need 4-d input and kernel, got {x.data.shape} and {w.data.shape}")
    n, cin, h, wid = x.data.shape
    cout, cink, kh, kw = w.data.shape
    if cin != cink:
        raise ValueError(f"conv2d: input channels {cin} != kernel channels {cink}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride {stride} or padding {padding}")
    if kh > h + 2 * padding or kw > wid + 2 * padding:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wid + 2 * padding}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols, oh, ow = _im2col(xp, kh, kw, stride)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (cols @ wmat.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def bwd(g: np.ndarray):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        dw = (gmat.T @ cols).reshape(w.data.shape)
        dcols = (gmat @ wmat).reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, padding:padding + h, padding:padding + wid] if padding else dxp
        return dx, dw

    return _emit([x, w], out, bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane over its spatial extent."""
    if x.data.ndim != 4:
        raise ValueError(f"instance_norm: need (N,C,H,W), got {x.data.shape}")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(f"instance_norm: gamma/beta must have shape ({c},)")
    m = h * w
    xd = x.data.astype(np.float64)
    mean = xd.mean(axis=(2, 3), keepdims=True)
    var = xd.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mean) * inv).astype(np.float32)
    inv32 = inv.astype(np.float32)
    gcol = gamma.data.reshape(1, c, 1, 1)
    out = gcol * xhat + beta.data.reshape(1, c, 1, 1)

    def bwd(g: np.ndarray):
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        dgamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        dxhat = g * gcol
        s1 = dxhat.sum(axis=(2, 3), keepdims=True, dtype=np.float64).astype(np.float32)
        s2 = (dxhat * xhat).sum(axis=(2, 3), keepdims=True, dtype=np.float64).astype(np.float32)
        dx = (inv32 / m) * (m * dxhat - s1 - xhat * s2)
        return dx, dgamma, dbeta

    return _emit([x, gamma, beta], out, bwd)


# ---------------------------------------------------------------------------
# Prototype-head operations


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax across the channel axis of (N,P,H,W), per spatial location."""
    if x.data.ndim != 4:
        raise ValueError(f"softmax_channel: need (N,P,H,W), got {x.data.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
    y = (e / denom).astype(np.float32)

    def bwd(g: np.ndarray):
        inner = (g * y).sum(axis=1, keepdims=True, dtype=np.float64).astype(np.float32)
        return (y * (g - inner),)

    return _emit([x], y, bwd)


def spatial_max_pool(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Max over the spatial grid of (N,P,H,W).

    Returns (values (N,P), argmax locations (N,P,2) as row, col). Ties
    break to the first maximum in row-major scan order, and the gradient
    routes only to that location.
    """
    if x.data.ndim != 4:
        raise ValueError(f"spatial_max_pool: need (N,P,H,W), got {x.data.shape}")
    n, p, h, w = x.data.shape
    flat = x.data.reshape(n, p, h * w)
    idx = flat.argmax(axis=2)
    values = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    locs = np.stack([idx // w, idx % w], axis=2).astype(np.int64)

    def bwd(g: np.ndarray):
        dx = np.zeros((n, p, h * w), dtype=np.float32)
        np.put_along_axis(dx, idx[:, :, None], g[:, :, None], axis=2)
        return (dx.reshape(n, p, h, w),)

    return _emit([x], values, bwd), locs


def flip_w(x: Tensor) -> Tensor:
    """Reverse the last axis (horizontal flip for NCHW grids)."""
    return _emit([x], np.ascontiguousarray(x.data[..., ::-1]),
                 lambda g: (np.ascontiguousarray(g[..., ::-1]),))


def channel_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-location inner product over channels: (N,C,H,W)^2 -> (N,H,W)."""
    _check_same_shape(a, b, "channel_dot")
    ad, bd = a.data, b.data
    out = np.einsum("nchw,nchw->nhw", ad, bd)

    def bwd(g: np.ndarray):
        return g[:, None] * bd, g[:, None] * ad

    return _emit([a, b], out, bwd)


def align_agreement(za: Tensor, zb: Tensor, flip_mask: np.ndarray,
                    include_mask: np.ndarray, eps: float = 1e-12) -> Tensor:
    """Mean negative log agreement between two view grids.

    For each included sample, zb is brought into za's frame (horizontal
    flip where flip_mask says so), then the per-location channel inner
    product feeds -log. Excluded samples contribute nothing.
    """
    _check_same_shape(za, zb, "align_agreement")
    n = za.data.shape[0]
    flip_mask = np.asarray(flip_mask, dtype=bool)
    include_mask = np.asarray(include_mask, dtype=bool)
    if flip_mask.shape != (n,) or include_mask.shape != (n,):
        raise ValueError("align_agreement: masks must have shape (batch,)")

    zb2 = zb.data.copy()
    if flip_mask.any():
        zb2[flip_mask] = zb.data[flip_mask][..., ::-1]
    dot = np.einsum("nchw,nchw->nhw", za.data, zb2) + np.float32(eps)
    count = int(include_mask.sum()) * dot.shape[1] * dot.shape[2]
    if count == 0:
        return _emit([za, zb], np.float32(0.0), lambda g: (np.zeros_like(za.data),
                                                           np.zeros_like(zb.data)))
    val = np.float32(-np.log(dot[include_mask].astype(np.float64)).sum() / count)

    def bwd(g: np.ndarray):
        ddot = np.zeros_like(dot)
        ddot[include_mask] = -1.0 / (count * dot[include_mask])
        ddot *= g
        dza = ddot[:, None] * zb2
        dzb = ddot[:, None] * za.data
        if flip_mask.any():
            dzb[flip_mask] = dzb[flip_mask][..., ::-1]
        return dza, dzb

    return _emit([za, zb], val, bwd)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under (N,C) logits."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy_logits: need (N,C) logits, got {logits.data.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy_logits: labels shape {labels.shape} != ({n},)")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    denom = e.sum(axis=1, keepdims=True, dtype=np.float64)
    logsm = shifted - np.log(denom).astype(np.float32)
    loss = np.float32(-logsm[np.arange(n), labels].astype(np.float64).mean())
    probs = (e / denom).astype(np.float32)

    def bwd(g: np.ndarray):
        dl = probs.copy()
        dl[np.arange(n), labels] -= 1.0
        return (dl * (g / n),)

    return _emit([logits], loss, bwd)


# ---------------------------------------------------------------------------
# Reductions (float64 accumulation)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    out = np.float32(x.data.sum(dtype=np.float64))
    return _emit([x], out, lambda g: (np.full(shape, g, dtype=np.float32),))


def mean_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    size = x.data.size
    out = np.float32(x.data.sum(dtype=np.float64) / size)
    return _emit([x], out, lambda g: (np.full(shape, g / size, dtype=np.float32),))


def sum_batch(x: Tensor) -> Tensor:
    """Sum over the leading (batch) axis."""
    if x.data.ndim < 1:
        raise ValueError("sum_batch: need at least one axis")
    n = x.data.shape[0]
    out = x.data.sum(axis=0, dtype=np.float64).astype(np.float32)
    return _emit([x], out, lambda g: (np.broadcast_to(g, (n,) + g.shape).copy(),))


def max_batch(x: Tensor) -> Tensor:
    """Max over the leading (batch) axis of a 2-d tensor; the gradient
    routes to the first maximal row entry, mirroring spatial_max_pool."""
    if x.data.ndim != 2:
        raise ValueError(f"max_batch: expected a 2-d tensor, got {x.data.shape}")
    winners = x.data.argmax(axis=0)
    cols = np.arange(x.data.shape[1])
    out = x.data[winners, cols]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[winners, cols] = g
        return (full,)

    return _emit([x], out, grad_fn)


def slice_batch(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) along the leading axis."""
    if not 0 <= start < stop <= x.data.shape[0]:
        raise ValueError(
            f"slice_batch: [{start}, {stop}) outside leading axis of "
            f"length {x.data.shape[0]}")

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    return _emit([x], np.ascontiguousarray(x.data[start:stop]), grad_fn)


# ---------------------------------------------------------------------------
# Tensor snapshots: little-endian binary, magic "PTNS", version, rank, dims,
# then raw float32 payload. Used by model checkpoints.

_MAGIC = b"PTNS"
_VERSION = 1


def save_tensor(path, t: Tensor) -> None:
    data = np.ascontiguousarray(t.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, data.ndim))
        f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
        f.write(data.tobytes())


def load_tensor(path) -> Tensor:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a tensor snapshot (magic {magic!r})")
        version, rank = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
        payload = f.read()
    expected = int(np.prod(dims, dtype=np.int64)) if dims else 1
    arr = np.frombuffer(payload, dtype="<f4")
    if arr.size != expected:
        raise ValueError(f"{path}: payload holds {arr.size} values, header says {expected}")
    return Tensor(arr.reshape(dims).copy())
