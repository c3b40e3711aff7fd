"""Dense tensors with tape-based reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional gradient buffer of the same
length. Operations record their parents and a backward closure; calling
``backward()`` on a scalar output walks the graph in reverse topological
order. Scalars are 64-bit by default; ``set_default_dtype("float32")``
switches newly created tensors to the faster low-precision mode.

Shape discipline: elementwise operations require identical operand shapes
(Python scalars are accepted); the only implicit broadcast is over leading
batch dimensions in ``matmul``. Anything else must go through an explicit
``broadcast_to``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

from .instrument import METER

__all__ = [
    "Tensor", "ShapeError", "set_default_dtype", "get_default_dtype",
    "no_grad", "is_grad_enabled", "add", "sub", "mul", "neg", "mul_scalar",
    "add_scalar", "mul_const", "matmul", "transpose", "reshape", "concat",
    "take_rows", "broadcast_to", "tsum", "tmean", "gelu", "sigmoid",
    "layer_norm", "masked_softmax", "rope_rotate", "conv2d_3x3",
    "bce_with_logits", "linear",
]

_DTYPES = {"float64": np.float64, "float32": np.float32}
_default_dtype = np.float64
_grad_enabled = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}; expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> type:
    return _default_dtype


def is_grad_enabled() -> bool:
    return _grad_enabled


@contextmanager
def no_grad():
    """Disable graph construction inside the block (pure-numpy forward)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        # arrays already in a float dtype are adopted as-is; anything else
        # (lists, scalars, integer arrays) takes the session default
        if isinstance(data, np.ndarray) and data.dtype in (np.float64, np.float32):
            arr = data
        else:
            arr = np.asarray(data, dtype=_default_dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward_fn = None
        METER.on_alloc(self, arr.nbytes if arr.base is None else 0)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, free_graph: bool = True) -> None:
        """Accumulate gradients of this scalar into every reachable leaf.

        ``free_graph`` drops node links during the sweep so intermediate
        buffers are released promptly; a second backward over the same graph
        then requires a fresh forward pass.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
            if free_graph:
                node._parents = ()
                node._backward_fn = None
                if node is not self and node.grad is not None and node._is_interior:
                    node.grad = None

    # interior nodes created by _make carry this marker so backward can
    # release their grad buffers while keeping leaf grads
    _is_interior = False

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Interior(Tensor):
    __slots__ = ()
    _is_interior = True


def _make(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = _Interior(data, requires_grad=True)
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
        return out
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _as_scalar(v) -> float | None:
    if isinstance(v, (int, float, np.integer, np.floating)):
        return float(v)
    return None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        def bw(g, a=a):
            _accum(a, g)
        return _make(a.data + s, (a,), bw)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")

    def bw(g, a=a, b=b):
        _accum(a, g)
        _accum(b, g)
    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return add(a, -s)
    return add(a, neg(b))


def neg(a: Tensor) -> Tensor:
    def bw(g, a=a):
        _accum(a, -g)
    return _make(-a.data, (a,), bw)


def mul(a: Tensor, b) -> Tensor:
    s = _as_scalar(b)
    if s is not None:
        return mul_scalar(a, s)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")

    def bw(g, a=a, b=b):
        _accum(a, g * b.data)
        _accum(b, g * a.data)
    return _make(a.data * b.data, (a, b), bw)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g, a=a):
        _accum(a, g * s)
    return _make(a.data * s, (a,), bw)


def add_scalar(a: Tensor, s: float) -> Tensor:
    return add(a, float(s))


def mul_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Multiply by a constant array (no gradient to ``arr``).

    ``arr`` must broadcast to ``a.shape`` by prepended/unit axes only; this
    is the documented escape hatch for masks and fixed scales.
    """
    arr = np.asarray(arr)
    try:
        np.broadcast_shapes(arr.shape, a.shape)
    except ValueError as e:
        raise ShapeError(f"mul_const: {arr.shape} does not broadcast to {a.shape}") from e

    def bw(g, a=a, arr=arr):
        _accum(a, g * arr)
    return _make(a.data * arr, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n] -> [..., m, n]``.

    Leading batch dimensions must agree or broadcast from 1; the inner
    dimensions must match exactly.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise ShapeError(f"matmul: batch dimensions disagree for shapes {a.shape} and {b.shape}") from e

    def bw(g, a=a, b=b):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))
    return _make(np.matmul(a.data, b.data), (a, b), bw)


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))

    def bw(g, a=a, inv=inv):
        _accum(a, np.transpose(g, inv))
    return _make(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    def bw(g, a=a):
        _accum(a, g.reshape(a.shape))
    return _make(a.data.reshape(shape), (a,), bw)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    nd = tensors[0].ndim
    ax = axis % nd
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != nd or any(i != ax and other[i] != base[i] for i in range(nd)):
            raise ShapeError(f"concat: incompatible shapes {base} vs {other} on axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g, tensors=tuple(tensors), offsets=offsets, ax=ax):
        sl = [slice(None)] * g.ndim
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            sl[ax] = slice(start, stop)
            _accum(t, g[tuple(sl)])
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Gather along axis 0: output shape ``idx.shape + a.shape[1:]``."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("take_rows: index array must be integer")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for axis of size {a.shape[0]}")

    def bw(g, a=a, idx=idx):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            _accum(a, ga)
    return _make(a.data[idx], (a,), bw)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from e

    def bw(g, a=a):
        _accum(a, _unbroadcast(g, a.shape))
    return _make(out, (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g, a=a, axis=axis, keepdims=keepdims):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis] if isinstance(axis, int) else int(np.prod([a.shape[i] for i in axis]))
    return mul_scalar(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with the bias explicitly broadcast over leading axes."""
    out = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[-1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match output width {w.shape[-1]}")
        out = add(out, broadcast_to(reshape(b, (1,) * (out.ndim - 1) + b.shape), out.shape))
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g, a=a, cdf=cdf):
        x = a.data
        _accum(a, g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)))
    return _make(x * cdf, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)

    def bw(g, a=a, y=y):
        _accum(a, g * y * (1.0 - y))
    return _make(y, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; ``gamma``/``beta`` are 1-D of that width."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: parameter shapes {gamma.shape}/{beta.shape} do not match width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = xc * ivar

    def bw(g, x=x, gamma=gamma, beta=beta, xc=xc, ivar=ivar, xhat=xhat, n=n):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).reshape(-1, n).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * ivar ** 3
            dmu = -(dxhat * ivar).sum(axis=-1, keepdims=True) + dvar * (-2.0) * xc.mean(axis=-1, keepdims=True)
            _accum(x, dxhat * ivar + dvar * (2.0 / n) * xc + dmu / n)
    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are 0.

    Every row must contain at least one unmasked entry; a fully masked row
    raises with its flat row index.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != logits.shape:
        raise ShapeError(f"masked_softmax: mask shape {mask.shape} vs logits {logits.shape}")
    row_ok = mask.any(axis=-1)
    if not row_ok.all():
        bad = int(np.argwhere(~row_ok.reshape(-1))[0][0])
        raise ValueError(f"masked_softmax: fully masked row at flat index {bad}")
    neg = np.finfo(logits.data.dtype).min
    z = np.where(mask, logits.data, neg)
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    e[~mask] = 0.0
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g, logits=logits, y=y):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(logits, (g - dot) * y)
    return _make(y, (logits,), bw)


def rope_rotate(x: Tensor, positions: np.ndarray, base: float = 10000.0) -> Tensor:
    """Rotary transform: channel pair (2t, 2t+1) rotated by pos * base^(-2t/c).

    ``positions`` is an integer array matching the leading shape of ``x``;
    the channel count must be even. Dot products of rotated vectors depend
    on position differences only.
    """
    c = x.shape[-1]
    if c % 2 != 0:
        raise ShapeError(f"rope_rotate: channel count must be even, got {c}")
    positions = np.asarray(positions)
    if positions.shape != x.shape[:-1]:
        raise ShapeError(f"rope_rotate: positions shape {positions.shape} vs leading {x.shape[:-1]}")
    half = c // 2
    theta = float(base) ** (-2.0 * np.arange(half, dtype=x.data.dtype) / c)
    ang = positions[..., None].astype(x.data.dtype) * theta
    cos, sin = np.cos(ang), np.sin(ang)
    xe, xo = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def bw(g, x=x, cos=cos, sin=sin):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        _accum(x, gx)
    return _make(out, (x,), bw)


def conv2d_3x3(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 same-padded convolution: [c_in,h,w] -> [c_out,h,w]."""
    if x.ndim != 3:
        raise ShapeError(f"conv2d_3x3: input must be [c,h,w], got {x.shape}")
    if kernels.ndim != 4 or kernels.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3: kernels must be [c_out,c_in,3,3], got {kernels.shape}")
    if kernels.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d_3x3: channel mismatch, input {x.shape} vs kernels {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise ShapeError(f"conv2d_3x3: bias shape {bias.shape} vs c_out {kernels.shape[0]}")
    cin, h, w = x.shape
    cout = kernels.shape[0]
    xpad = np.zeros((cin, h + 2, w + 2), dtype=x.data.dtype)
    xpad[:, 1:h + 1, 1:w + 1] = x.data
    out = np.broadcast_to(bias.data[:, None], (cout, h * w)).copy()
    for dy in range(3):
        for dx in range(3):
            patch = xpad[:, dy:dy + h, dx:dx + w].reshape(cin, h * w)
            out += kernels.data[:, :, dy, dx] @ patch
    out = out.reshape(cout, h, w)

    def bw(g, x=x, kernels=kernels, bias=bias, xpad=xpad, shape=(cin, cout, h, w)):
        cin, cout, h, w = shape
        gf = g.reshape(cout, h * w)
        if bias.requires_grad:
            _accum(bias, gf.sum(axis=1))
        gk = np.zeros_like(kernels.data) if kernels.requires_grad else None
        gxpad = np.zeros_like(xpad) if x.requires_grad else None
        for dy in range(3):
            for dx in range(3):
                patch = xpad[:, dy:dy + h, dx:dx + w].reshape(cin, h * w)
                if gk is not None:
                    gk[:, :, dy, dx] = gf @ patch.T
                if gxpad is not None:
                    gxpad[:, dy:dy + h, dx:dx + w] += (kernels.data[:, :, dy, dx].T @ gf).reshape(cin, h, w)
        if gk is not None:
            _accum(kernels, gk)
        if gxpad is not None:
            _accum(x, gxpad[:, 1:h + 1, 1:w + 1])
    return _make(out, (x, kernels, bias), bw)


def bce_with_logits(logits: Tensor, targets, valid_mask: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with logits over the valid entries.

    Computed in the overflow-free form max(x,0) - x*y + log1p(exp(-|x|)).
    ``targets`` may be a Tensor or array of {0,1}; no gradient flows to it.
    """
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.data.dtype)
    valid = np.asarray(valid_mask, dtype=bool)
    if y.shape != logits.shape or valid.shape != logits.shape:
        raise ShapeError(
            f"bce_with_logits: shapes differ, logits {logits.shape}, targets {y.shape}, mask {valid.shape}")
    count = int(valid.sum())
    if count == 0:
        raise ValueError("bce_with_logits: empty valid mask")
    x = logits.data
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    total = float(per[valid].sum()) / count

    def bw(g, logits=logits, y=y, valid=valid, count=count):
        gx = (expit(logits.data) - y) * valid / count
        _accum(logits, gx * g)
    return _make(np.asarray(total, dtype=x.dtype), (logits,), bw)
