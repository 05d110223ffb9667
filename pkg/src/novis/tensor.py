"""Minimal dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a backward closure on
the output tensor. ``Tensor.backward`` orders the recorded graph topologically
(the tape) and visits each node once in reverse.

Values are 32-bit by default. Inside :func:`shadow64` newly created tensors
are 64-bit, which is how the gradient checks run.
"""
from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractViolation(ValueError):
    """An operation was called outside its precondition."""


_state = {"dtype": np.float32, "grad": True}


def default_dtype():
    return _state["dtype"]


@contextmanager
def shadow64():
    """Create new tensors in 64-bit precision for the duration of the block."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _state["dtype"])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- construction of recorded nodes ---------------------------------
    @staticmethod
    def _make(data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.op = op
        needs = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic properties -----------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autodiff -------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractViolation("loss is not on the tape (no input requires grad)")
        tape = build_tape(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(tape):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in tape:
            if node._backward is not None:
                node._backward = None
                node._parents = ()

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)

    def __rtruediv__(self, other):
        return mul(_as_tensor(other, self), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)


def build_tape(root: Tensor) -> list[Tensor]:
    """Topological order of the recorded graph under ``root`` (iterative DFS)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def make_op(data: np.ndarray, parents: Sequence[Tensor], backward, op: str = "custom") -> Tensor:
    """Record a user-defined operation. ``backward(g)`` must accumulate into parents."""
    return Tensor._make(data, parents, backward, op)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._make(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._make(out_data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return Tensor._make(-a.data, (a,), backward, "neg")


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def backward(g):
        a._accumulate(-g * out_data * out_data)

    return Tensor._make(out_data, (a,), backward, "reciprocal")


def power(a: Tensor, p: float) -> Tensor:
    out_data = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return Tensor._make(out_data, (a,), backward, "pow")


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor._make(out_data, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._make(np.log(a.data), (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out_data)

    return Tensor._make(out_data, (a,), backward, "sqrt")


def sigmoid(a: Tensor) -> Tensor:
    out_data = _sigmoid(a.data)

    def backward(g):
        a._accumulate(g * out_data * (1.0 - out_data))

    return Tensor._make(out_data, (a,), backward, "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - out_data * out_data))

    return Tensor._make(out_data, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return Tensor._make(out_data, (a,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
        a._accumulate(g * d)

    return Tensor._make(out_data, (a,), backward, "gelu")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out_data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        a._accumulate(g * _sigmoid(x))

    return Tensor._make(out_data, (a,), backward, "softplus")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy between sigmoid(logits) and targets."""
    x = logits.data
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=x.dtype)
    out_data = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        logits._accumulate(g * (_sigmoid(x) - y))

    return Tensor._make(out_data, (logits,), backward, "bce_with_logits")


# -- shape ------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return Tensor._make(out_data, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = np.transpose(a.data, axes)

    def backward(g):
        inv = None if axes is None else np.argsort(axes)
        a._accumulate(np.transpose(g, inv))

    return Tensor._make(out_data, (a,), backward, "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out_data = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        a._accumulate(full)

    return Tensor._make(np.array(out_data, copy=True), (a,), backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, sizes, axis=axis)):
            if t.requires_grad:
                t._accumulate(part)

    return Tensor._make(out_data, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor._make(out_data, tensors, backward, "stack")


# -- reductions ----------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.shape))

    return Tensor._make(np.asarray(out_data), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


# -- linear algebra --------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions broadcast as in ``np.matmul``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation(f"matmul needs ≥2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return Tensor._make(out_data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y + b if b is not None else y


# -- softmax family --------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)))

    return Tensor._make(out_data, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out_data = z - lse

    def backward(g):
        p = np.exp(out_data)
        a._accumulate(g - p * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out_data, (a,), backward, "log_softmax")


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis restricted to positions where ``mask`` is nonzero.

    Rows whose mask is entirely zero are treated as fully unmasked.
    """
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask) != 0
    try:
        m = np.broadcast_to(m, logits.shape)
    except ValueError as exc:
        raise ContractViolation(
            f"mask shape {np.shape(mask)} not broadcastable to {logits.shape}") from exc
    empty = ~m.any(axis=-1, keepdims=True)
    keep = m | empty
    x = np.where(keep, logits.data, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(z), 0.0).astype(logits.dtype, copy=False)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        logits._accumulate(out_data * (g - (g * out_data).sum(axis=-1, keepdims=True)))

    return Tensor._make(out_data, (logits,), backward, "masked_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ContractViolation(f"layer_norm affine params must be [{c}], got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, c).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, c).sum(axis=0))
        if x.requires_grad:
            gx = g * gain.data
            x._accumulate(inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return Tensor._make(out_data, (x, gain, bias), backward, "layer_norm")


# -- convolution and resampling ---------------------------------------------------

def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Cross-correlation with zero padding ``k // 2``.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; ``w`` is
    ``[C_out, C_in, k, k]`` with odd ``k``. Output spatial size is ``ceil(H / stride)``.
    """
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ContractViolation(f"conv2d kernel must be [C_out, C_in, k, k] with odd k, got {w.shape}")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ContractViolation(f"conv2d input {x.shape} does not match kernel {w.shape}")
    bsz, cin, h, wd = xd.shape
    cout, _, k, _ = w.shape
    p = k // 2
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    # cols[b, ho, wo, cin, i, j]
    cols = np.empty((bsz, ho, wo, cin, k, k), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            sl = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            cols[..., i, j] = sl.transpose(0, 2, 3, 1)
    cols2 = cols.reshape(bsz * ho * wo, cin * k * k)
    wmat = w.data.reshape(cout, cin * k * k)
    # one product per sample keeps each sample's result independent of the batch size
    per = cols.reshape(bsz, ho * wo, cin * k * k)
    out = np.stack([per[b] @ wmat.T for b in range(bsz)]).reshape(bsz, ho, wo, cout).transpose(0, 3, 1, 2)
    out_data = np.ascontiguousarray(out[0] if squeeze else out)

    def backward(g):
        g4 = g[None] if squeeze else g
        gmat = g4.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, cout)
        if w.requires_grad:
            w._accumulate((gmat.T @ cols2).reshape(w.shape))
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(bsz, ho, wo, cin, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * (ho - 1) + 1:stride,
                        j:j + stride * (wo - 1) + 1:stride] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
            x._accumulate(gx[0] if squeeze else gx)

    return Tensor._make(out_data, (x, w), backward, "conv2d")


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Bilinear (align_corners=False) interpolation weights, shape [n_out, n_in]."""
    a = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        a[o, i0] += 1.0 - lam
        a[o, i1] += lam
    return a


_interp_cache: dict = {}


def _cached_interp(n_in: int, n_out: int, dtype) -> np.ndarray:
    key = (n_in, n_out, np.dtype(dtype).str)
    if key not in _interp_cache:
        _interp_cache[key] = interp_matrix(n_in, n_out).astype(dtype)
    return _interp_cache[key]


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes of ``x`` (``[..., H, W]``) bilinearly."""
    if out_h < 1 or out_w < 1:
        raise ContractViolation(f"target size must be ≥ 1, got {out_h}×{out_w}")
    h, w = x.shape[-2:]
    ah = _cached_interp(h, out_h, x.dtype)
    aw = _cached_interp(w, out_w, x.dtype)
    out_data = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g):
        x._accumulate(np.matmul(np.matmul(ah.T, g), aw))

    return Tensor._make(out_data, (x,), backward, "bilinear_resize")


def resize_array(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Non-recording bilinear resize of a plain array."""
    h, w = x.shape[-2:]
    ah = _cached_interp(h, out_h, x.dtype)
    aw = _cached_interp(w, out_w, x.dtype)
    return np.matmul(np.matmul(ah, x), aw.T)


# -- tensor container files -------------------------------------------------------

MAGIC = b"NOVISTEN"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_tensor(path, value) -> None:
    """Write ``MAGIC | u32 header length | JSON header | little-endian payload``."""
    arr = np.asarray(value.data if isinstance(value, Tensor) else value)
    code = "f64" if arr.dtype == np.float64 else "f32"
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    header = json.dumps({"shape": list(arr.shape), "dtype": code}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen])
    dt = _DTYPES.get(header.get("dtype"))
    if dt is None:
        raise ValueError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape = tuple(header["shape"])
    payload = raw[12 + hlen:]
    expected = int(np.prod(shape)) * dt.itemsize
    if len(payload) != expected:
        raise ValueError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
