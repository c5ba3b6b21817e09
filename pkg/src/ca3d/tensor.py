"""N-dimensional tensors with reverse-mode autodiff and numeric-mode control.

Tensors carry a NumericMode tag. In the pure binary16 modes every operation
result (including each multiply-accumulate inside the kernels and every
intermediate gradient of the backward pass) is rounded through binary16;
storage stays float64 so values are exact and hardware independent. Reduction
order is fixed (sequential over the canonical row-major index order), so
results are bitwise reproducible.
"""

from dataclasses import dataclass

import numpy as np

from . import backend

FULL32 = "full32"
QAT = "qat"
PURE16_PREPARAM = "pure16_preparam"
PURE16_NAIVE = "pure16_naive"
STATIC_POST_QUANT = "static_post_quant"

_KINDS = (FULL32, QAT, PURE16_PREPARAM, PURE16_NAIVE, STATIC_POST_QUANT)
_ROUNDING_KINDS = (PURE16_PREPARAM, PURE16_NAIVE, STATIC_POST_QUANT)

# CLI spellings <-> mode kinds
MODE_NAMES = {
    "full32": FULL32,
    "qat": QAT,
    "f16": PURE16_PREPARAM,
    "f16-naive": PURE16_NAIVE,
    "static": STATIC_POST_QUANT,
}


@dataclass(frozen=True)
class NumericMode:
    """Storage/arithmetic precision policy plus the pre-parameter scale T."""

    kind: str = FULL32
    scale_t: float = 0.1

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown numeric mode {self.kind!r}")
        if not (self.scale_t > 0) or not np.isfinite(self.scale_t):
            raise ValueError("scale_t must be a positive finite real")

    @property
    def rounds_arithmetic(self):
        return self.kind in _ROUNDING_KINDS

    @classmethod
    def parse(cls, name, scale_t=0.1):
        if name not in MODE_NAMES:
            raise ValueError(f"unknown mode name {name!r} (choose from {sorted(MODE_NAMES)})")
        return cls(MODE_NAMES[name], scale_t)


def f16_round(x):
    """Round-to-nearest-even through IEEE 754 binary16 (total on reals/inf/NaN).

    Scalars in, scalars out; arrays in, arrays out.
    """
    if np.isscalar(x) or getattr(x, "ndim", None) == 0:
        return float(backend.round_half(np.asarray(x, dtype=np.float64).reshape(1))[0])
    return backend.round_half(np.asarray(x, dtype=np.float64))


def _round_mode(x, mode):
    return backend.round_half(x) if mode.rounds_arithmetic else x


# ---------------------------------------------------------------------------
# multiply/divide accounting (used by the attention complexity benchmark)
# ---------------------------------------------------------------------------


class OpCounter:
    """Counts scalar multiplies/divides executed by forward tensor ops."""

    def __init__(self):
        self.enabled = False
        self.macs = 0

    def add(self, n):
        if self.enabled:
            self.macs += int(n)

    def __enter__(self):
        self.enabled = True
        self.macs = 0
        return self

    def __exit__(self, *exc):
        self.enabled = False
        return False


op_counter = OpCounter()


# ---------------------------------------------------------------------------
# autodiff graph recording
# ---------------------------------------------------------------------------


class _GradMode:
    enabled = True


class no_grad:
    """Context manager disabling graph recording (eval-mode forward passes)."""

    def __enter__(self):
        self._saved = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._saved
        return False


class Tensor:
    """A float64-backed N-d array node in a reverse-mode autodiff graph."""

    __slots__ = ("data", "mode", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, mode=None, requires_grad=False):
        self.mode = mode if mode is not None else NumericMode()
        arr = np.asarray(data, dtype=np.float64)
        if self.mode.rounds_arithmetic:
            arr = backend.round_half(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @classmethod
    def _wrap(cls, data, mode, parents=(), backward=None, requires_grad=False):
        t = cls.__new__(cls)
        t.data = data
        t.mode = mode
        t.requires_grad = requires_grad
        t.grad = None
        t._parents = parents
        t._backward = backward
        return t

    # -- conveniences ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data, self.mode)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, mode={self.mode.kind}{req})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.mode), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.mode), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    # -- autodiff ----------------------------------------------------------
    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates into .grad fields."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss")
        if self._backward is None and not self._parents:
            raise RuntimeError(
                "graph was not recorded; run the forward pass in training mode "
                "(outside no_grad) before calling backward()"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _accum(t, g):
    # aliasing is safe: gradient buffers are replaced, never mutated in place
    if t.grad is None:
        t.grad = np.asarray(g, dtype=np.float64)
    else:
        t.grad = _round_mode(t.grad + g, t.mode)


def _coerce(x, mode):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), mode)


def _pair(a, b):
    if isinstance(a, Tensor):
        b = _coerce(b, a.mode)
    else:
        a = _coerce(a, b.mode)
    if a.mode.kind != b.mode.kind:
        raise ValueError(f"mixed numeric modes: {a.mode.kind} vs {b.mode.kind}")
    return a, b


def _recording(*tensors):
    return _GradMode.enabled and any(t.requires_grad for t in tensors)


def _unbroadcast(g, shape, mode):
    """Reduce g back to `shape` after numpy broadcasting (rounded reduction)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = list(range(lead))
    for i, s in enumerate(shape):
        if s == 1 and g.shape[lead + i] != 1:
            axes.append(lead + i)
    r = _reduce_sum(g, tuple(axes), mode, keepdims=True)
    return r.reshape(shape)


def _reduce_sum(x, axes, mode, keepdims=False):
    """Sum over axes in canonical (row-major) order, rounded per accumulate."""
    if axes is None:
        axes = tuple(range(x.ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % max(x.ndim, 1) for a in axes))
    if not axes:
        return x.copy()
    if not mode.rounds_arithmetic:
        # contiguity pins numpy's pairwise-summation grouping, so results
        # depend only on values, not on the operand's stride layout
        return np.sum(np.ascontiguousarray(x), axis=axes, keepdims=keepdims)
    keep = [a for a in range(x.ndim) if a not in axes]
    perm = keep + list(axes)
    moved = np.transpose(x, perm)
    lead = moved.shape[: len(keep)]
    red = int(np.prod([moved.shape[len(keep) + i] for i in range(len(axes))], dtype=np.int64)) if axes else 1
    flat = np.ascontiguousarray(moved).reshape(int(np.prod(lead, dtype=np.int64)) if keep else 1, red)
    out = backend.sum_half_rows(flat).reshape(lead if keep else ())
    if keepdims:
        full = [1 if a in axes else x.shape[a] for a in range(x.ndim)]
        out = out.reshape(full)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _pair(a, b)
    mode = a.mode
    out = _round_mode(a.data + b.data, mode)
    if not _recording(a, b):
        return Tensor._wrap(out, mode)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape, mode))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape, mode))

    return Tensor._wrap(out, mode, (a, b), bwd, True)


def sub(a, b):
    a, b = _pair(a, b)
    mode = a.mode
    out = _round_mode(a.data - b.data, mode)
    if not _recording(a, b):
        return Tensor._wrap(out, mode)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape, mode))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape, mode))

    return Tensor._wrap(out, mode, (a, b), bwd, True)


def neg(a):
    mode = a.mode
    out = -a.data
    if not _recording(a):
        return Tensor._wrap(out, mode)

    def bwd(g):
        _accum(a, -g)

    return Tensor._wrap(out, mode, (a,), bwd, True)


def mul(a, b):
    a, b = _pair(a, b)
    mode = a.mode
    out_shape = np.broadcast_shapes(a.data.shape, b.data.shape)
    op_counter.add(int(np.prod(out_shape, dtype=np.int64)))
    out = _round_mode(a.data * b.data, mode)
    if not _recording(a, b):
        return Tensor._wrap(out, mode)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(_round_mode(g * b.data, mode), a.data.shape, mode))
        if b.requires_grad:
            _accum(b, _unbroadcast(_round_mode(g * a.data, mode), b.data.shape, mode))

    return Tensor._wrap(out, mode, (a, b), bwd, True)


def div(a, b):
    a, b = _pair(a, b)
    mode = a.mode
    op_counter.add(int(np.prod(np.broadcast_shapes(a.data.shape, b.data.shape), dtype=np.int64)))
    out = _round_mode(a.data / b.data, mode)
    if not _recording(a, b):
        return Tensor._wrap(out, mode)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(_round_mode(g / b.data, mode), a.data.shape, mode))
        if b.requires_grad:
            t = _round_mode(g * out, mode)
            _accum(b, _unbroadcast(_round_mode(-t / b.data, mode), b.data.shape, mode))

    return Tensor._wrap(out, mode, (a, b), bwd, True)


def relu(a):
    mode = a.mode
    out = np.maximum(a.data, 0.0)
    if not _recording(a):
        return Tensor._wrap(out, mode)
    mask = a.data > 0

    def bwd(g):
        _accum(a, g * mask)

    return Tensor._wrap(out, mode, (a,), bwd, True)


def exp(a):
    mode = a.mode
    out = _round_mode(np.exp(a.data), mode)
    if not _recording(a):
        return Tensor._wrap(out, mode)

    def bwd(g):
        _accum(a, _round_mode(g * out, mode))

    return Tensor._wrap(out, mode, (a,), bwd, True)


def log(a):
    mode = a.mode
    out = _round_mode(np.log(a.data), mode)
    if not _recording(a):
        return Tensor._wrap(out, mode)

    def bwd(g):
        _accum(a, _round_mode(g / a.data, mode))

    return Tensor._wrap(out, mode, (a,), bwd, True)


def sqrt(a):
    mode = a.mode
    out = _round_mode(np.sqrt(a.data), mode)
    if not _recording(a):
        return Tensor._wrap(out, mode)

    def bwd(g):
        denom = _round_mode(2.0 * out, mode)
        _accum(a, _round_mode(g / denom, mode))

    return Tensor._wrap(out, mode, (a,), bwd, True)


def matmul(a, b):
    """2-D matmul (N,K) @ (K,M); per-MAC rounded in pure16 modes."""
    a, b = _pair(a, b)
    mode = a.mode
    n, k = a.data.shape
    m = b.data.shape[1]
    op_counter.add(n * k * m)
    if mode.rounds_arithmetic:
        out = backend.matmul_half(a.data, b.data)
    else:
        out = a.data @ b.data
    if not _recording(a, b):
        return Tensor._wrap(out, mode)

    def bwd(g):
        if a.requires_grad:
            if mode.rounds_arithmetic:
                ga = backend.matmul_half(g, np.ascontiguousarray(b.data.T))
            else:
                ga = g @ b.data.T
            _accum(a, ga)
        if b.requires_grad:
            if mode.rounds_arithmetic:
                gb = backend.matmul_half(np.ascontiguousarray(a.data.T), g)
            else:
                gb = a.data.T @ g
            _accum(b, gb)

    return Tensor._wrap(out, mode, (a, b), bwd, True)


def tsum(a, axis=None, keepdims=False):
    mode = a.mode
    out = _reduce_sum(a.data, axis, mode, keepdims)
    out = np.asarray(out, dtype=np.float64)
    if not _recording(a):
        return Tensor._wrap(out, mode)
    axes = tuple(range(a.data.ndim)) if axis is None else ((axis,) if isinstance(axis, int) else tuple(axis))
    axes = tuple(ax % a.data.ndim for ax in axes)

    def bwd(g):
        gg = g
        if not keepdims:
            expand = [1 if ax in axes else a.data.shape[ax] for ax in range(a.data.ndim)]
            gg = np.reshape(g, expand)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return Tensor._wrap(out, mode, (a,), bwd, True)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.data.shape[ax % a.data.ndim] for ax in axes], dtype=np.int64))
    return div(tsum(a, axis, keepdims), float(n))


def tmax(a, axis, keepdims=False):
    """Max along one axis; gradient routes to the first maximum (canonical)."""
    mode = a.mode
    out = np.max(a.data, axis=axis, keepdims=keepdims)
    if not _recording(a):
        return Tensor._wrap(out, mode)
    idx = np.argmax(a.data, axis=axis)

    def bwd(g):
        gx = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gg, axis=axis)
        _accum(a, gx)

    return Tensor._wrap(out, mode, (a,), bwd, True)


def reshape(a, shape):
    mode = a.mode
    out = np.reshape(a.data, shape)
    if not _recording(a):
        return Tensor._wrap(out, mode)

    def bwd(g):
        _accum(a, np.reshape(g, a.data.shape))

    return Tensor._wrap(out, mode, (a,), bwd, True)


def transpose(a, axes):
    mode = a.mode
    out = np.transpose(a.data, axes)
    if not _recording(a):
        return Tensor._wrap(out, mode)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, np.transpose(g, inv))

    return Tensor._wrap(out, mode, (a,), bwd, True)


def getitem(a, key):
    """Basic (slice/int) indexing; gradient scatters back into a zero tensor."""
    mode = a.mode
    out = a.data[key]
    if not _recording(a):
        return Tensor._wrap(out, mode)

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[key] = g
        _accum(a, gx)

    return Tensor._wrap(out, mode, (a,), bwd, True)


def pad_constant(a, pad_width, value=0.0):
    mode = a.mode
    out = np.pad(a.data, pad_width, mode="constant", constant_values=value)
    if not _recording(a):
        return Tensor._wrap(out, mode)
    slices = tuple(slice(p[0], p[0] + s) for p, s in zip(pad_width, a.data.shape))

    def bwd(g):
        _accum(a, g[slices])

    return Tensor._wrap(out, mode, (a,), bwd, True)


def stack(tensors, axis=0):
    mode = tensors[0].mode
    for t in tensors:
        if t.mode.kind != mode.kind:
            raise ValueError("mixed numeric modes in stack")
    out = np.stack([t.data for t in tensors], axis=axis)
    if not _recording(*tensors):
        return Tensor._wrap(out, mode)

    def bwd(g):
        pieces = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                _accum(t, piece)

    return Tensor._wrap(out, mode, tuple(tensors), bwd, True)


def pick(a, idx):
    """Row gather out[i] = a[i, idx[i]] for a 2-D tensor (label selection)."""
    mode = a.mode
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]
    if not _recording(a):
        return Tensor._wrap(out, mode)

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[rows, idx] = g
        _accum(a, gx)

    return Tensor._wrap(out, mode, (a,), bwd, True)


def stop_gradient(a):
    return a.detach()


# ---------------------------------------------------------------------------
# gradient utilities
# ---------------------------------------------------------------------------


def gradients(loss, params):
    """Run backward from scalar `loss`, returning {name: gradient array}.

    `params` maps names to Tensors; missing gradients come back as zeros.
    """
    for p in params.values():
        p.zero_grad()
    loss.backward()
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


def finite_diff_grad(f, x, eps=1e-3, coords=None):
    """Central-difference gradient of scalar f at x, always in float64.

    f takes a float64 ndarray and returns a python float. `coords` optionally
    restricts evaluation to a list of flat indices (others come back zero).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = grad.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x0)
        flat[i] = orig - eps
        fm = f(x0)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
