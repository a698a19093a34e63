"""Small reverse-mode autodiff over numpy arrays.

Only the operations the detector, its losses and the domain classifier need
are provided.  A ``Tensor`` records its parents and a closure mapping the
upstream gradient to parent gradients; ``Tensor.backward`` walks the graph
once in reverse topological order and then releases it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LEAKY_SLOPE = 0.1


class NumericError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward value or a gradient."""


class StructureError(ValueError):
    """Raised when two parameter sets disagree on names or shapes."""


ParamSet = dict  # name -> np.ndarray


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it.

        The graph is released afterwards, so a second call is a usage error.
        """
        if self._consumed:
            raise RuntimeError("backward() already called on this forward record")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            check_finite(g, "gradient")
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            node._parents = ()
            node._backward = None
            node._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, idx):
        return take(self, idx)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.data.dtype))
    return a, b


# elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out, (a, b), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = _coerce(a, b)
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = _coerce(a, b)
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


# elementwise unary -------------------------------------------------------


def power(x: Tensor, exponent: float) -> Tensor:
    out = x.data ** exponent
    return _make(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,))


def sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_np(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def atan(x: Tensor) -> Tensor:
    return _make(np.arctan(x.data), (x,), lambda g: (g / (1.0 + x.data * x.data),))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def clip(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _make(out, (x,), lambda g: (g * inside,))


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy of sigmoid(logits) against a constant target."""
    t = np.asarray(target, dtype=logits.data.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (logits,), lambda g: (g * (sigmoid_np(x) - t),))


# reductions and shape ----------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), (x,), backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def take(x: Tensor, idx) -> Tensor:
    """Indexing (basic or advanced); gradients scatter-add back."""
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# layers --------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """NHWC convolution with 'same'-style padding k//2.

    ``w`` has shape [k, k, c_in, c_out].
    """
    k, _, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[-1]} channels, kernel expects {cin}")
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    bsz, hp, wp, _ = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, k * k * cin)
    wmat = w.data.reshape(k * k * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.data
    out = out.reshape(bsz, ho, wo, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(bsz, ho, wo, k, k, cin)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, pad:hp - pad, pad:wp - pad, :] if pad else dxp
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward)


def grl_forward(x: np.ndarray) -> np.ndarray:
    return x


def grl_backward(upstream: np.ndarray, lam: float) -> np.ndarray:
    return -lam * upstream


def grl(x: Tensor, lam: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, ``-lam * g`` backward."""
    return _make(grl_forward(x.data).copy(), (x,), lambda g: (grl_backward(g, lam),))


# parameters ----------------------------------------------------------------


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def as_params(params: ParamSet, requires_grad: bool = True) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad) for k, v in params.items()}


def check_same_structure(a: ParamSet, b: ParamSet) -> None:
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))
        raise StructureError(f"parameter names differ: {missing}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise StructureError(f"shape mismatch for {k}: {a[k].shape} vs {b[k].shape}")


def ema_update(teacher: ParamSet, student: ParamSet, m: float) -> ParamSet:
    """Return the teacher moved toward the student: ``m * t + (1 - m) * s``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"EMA rate must be in [0, 1], got {m}")
    check_same_structure(teacher, student)
    return {k: m * teacher[k] + (1.0 - m) * student[k] for k in teacher}


class SGD:
    """Momentum SGD with decoupled-from-bias weight decay (applied to ``*.w`` only)."""

    def __init__(self, lr: float = 0.01, momentum: float = 0.937, weight_decay: float = 5e-4):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]) -> ParamSet:
        new = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                new[k] = p
                continue
            if self.weight_decay and k.endswith(".w"):
                g = g + self.weight_decay * p
            buf = self.buffers.get(k)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[k] = buf
            new[k] = (p - self.lr * buf).astype(p.dtype)
        return new


# checkpoint container -----------------------------------------------------

CKPT_MAGIC = b"SSODCKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, groups: dict[str, dict[str, np.ndarray]], meta: dict) -> None:
    """Write a versioned tensor container.

    Layout: 8-byte magic, uint32 version, uint64 header length, a UTF-8 JSON
    header (``meta`` plus a tensor index of name/shape/dtype/offset/nbytes),
    then the concatenated little-endian payloads.
    """
    index = []
    blobs = []
    offset = 0
    for group, tensors in groups.items():
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            index.append({"name": f"{group}/{name}", "shape": list(arr.shape),
                          "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", blob[8:20])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[20:20 + hlen])
    base = 20 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {}
    for entry in header["tensors"]:
        start = base + entry["offset"]
        arr = np.frombuffer(blob[start:start + entry["nbytes"]], dtype=np.dtype(entry["dtype"]))
        arr = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))
        group, name = entry["name"].split("/", 1)
        groups.setdefault(group, {})[name] = arr
    return groups, header["meta"]


def param_grads(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    out = {}
    for k, t in tensors.items():
        if t.grad is not None:
            out[k] = t.grad
    return out
