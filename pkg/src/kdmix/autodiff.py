"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array and,
when it is the result of a recorded operation, a backward closure plus
references to its inputs.  Every tensor carries a creation sequence number, so
sorting the reachable nodes by that number recovers the execution order and
``backward`` walks it in reverse, visiting each node exactly once.

Broadcasting is restricted to identical shapes or tensor-vs-python-scalar.
Anything else raises :class:`DimensionError`.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

EPS_LOG = 1e-12

_DEFAULT_DTYPE = np.float32
_SEQ = itertools.count()
_GRAD_ENABLED = True


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(RuntimeError):
    """Raised when an operation is called outside its preconditions."""


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for newly created tensors.

    Ops keep the dtype of their inputs, so building parameters and inputs in
    float64 yields a fully float64 graph (used by finite-difference checks).
    """
    global _DEFAULT_DTYPE
    old = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = old


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (evaluation passes)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._seq = next(_SEQ)
        self._op = "leaf"

    # -- basic properties --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, no history, no gradient."""
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # -- graph -------------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str, dtype) -> Tensor:
    out = Tensor(data, dtype=dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _topological(root: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen[id(node)] = node
        stack.extend(p for p in node._parents if p.requires_grad)
    return sorted(seen.values(), key=lambda n: n._seq)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf.

    Interior nodes get their ``.grad`` populated too.  A second call on the
    same root adds the same amount again (no implicit zeroing).
    """
    if root.data.size != 1 or root.data.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root does not require grad")
    order = _topological(root)
    pending: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        _accumulate(node, g)
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = np.asarray(pg, dtype=parent.dtype)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# shape helpers
# ---------------------------------------------------------------------------

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _binary_operands(a, b, op: str) -> tuple[Tensor, Tensor | None, float | None]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if b.ndim == 0 and a.ndim != 0 or a.ndim == 0 and b.ndim != 0:
            raise DimensionError(f"{op}: 0-d tensor broadcast against {a.shape if a.ndim else b.shape}; use a python scalar")
        _check_same(a, b, op)
        return a, b, None
    if isinstance(a, Tensor):
        return a, None, float(b)
    raise TypeError(f"{op}: first operand must be a Tensor")


# ---------------------------------------------------------------------------
# elementwise suite
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, bt, c = _binary_operands(a, b, "add")
    if bt is None:
        return _make(a.data + a.dtype.type(c), (a,), lambda g: (g,), "add_scalar", a.dtype)
    return _make(a.data + bt.data, (a, bt), lambda g: (g, g), "add", a.dtype)


def sub(a, b) -> Tensor:
    a, bt, c = _binary_operands(a, b, "sub")
    if bt is None:
        return _make(a.data - a.dtype.type(c), (a,), lambda g: (g,), "sub_scalar", a.dtype)
    return _make(a.data - bt.data, (a, bt), lambda g: (g, -g), "sub", a.dtype)


def mul(a, b) -> Tensor:
    a, bt, c = _binary_operands(a, b, "mul")
    if bt is None:
        return scale(a, c)
    ad, bd = a.data, bt.data
    return _make(ad * bd, (a, bt), lambda g: (g * bd, g * ad), "mul", a.dtype)


def div(a, b) -> Tensor:
    a, bt, c = _binary_operands(a, b, "div")
    if bt is None:
        return scale(a, 1.0 / c)
    ad, bd = a.data, bt.data
    return _make(ad / bd, (a, bt), lambda g: (g / bd, -g * ad / (bd * bd)), "div", a.dtype)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale", a.dtype)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # np.maximum keeps NaN, so a diverged network still reports a non-finite loss
    return _make(np.maximum(a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu", a.dtype)


def log(a: Tensor, eps: float = EPS_LOG) -> Tensor:
    """Natural log with the input clamped to ``>= eps``; no gradient below the clamp."""
    clamped = np.maximum(a.data, a.dtype.type(eps))
    live = a.data >= eps

    def _bw(g):
        return (np.where(live, g / clamped, 0).astype(a.dtype),)

    return _make(np.log(clamped), (a,), _bw, "log", a.dtype)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp", a.dtype)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (g * 2 * ad,), "square", a.dtype)


def power(a: Tensor, p: float) -> Tensor:
    """``a ** p`` for non-negative ``a``.  ``p == 0`` gives ones with zero gradient."""
    ad = a.data
    if p == 0:
        return _make(np.ones_like(ad), (a,), lambda g: (np.zeros_like(ad),), "power", a.dtype)
    out = np.power(ad, p)

    def _bw(g):
        return (g * p * np.power(ad, p - 1),)

    return _make(out, (a,), _bw, "power", a.dtype)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    out = out.astype(a.dtype)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid", a.dtype)


def _reduce_axes(shape, axis):
    if axis is None:
        return tuple(range(len(shape)))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % len(shape) for ax in axis)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    axes = _reduce_axes(a.shape, axis)
    out = np.sum(a.data, axis=axes, dtype=np.float64).astype(a.dtype)
    keep = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def _bw(g):
        return (np.broadcast_to(g.reshape(keep), a.shape),)

    return _make(out, (a,), _bw, "sum", a.dtype)


def mean(a: Tensor, axis=None) -> Tensor:
    axes = _reduce_axes(a.shape, axis)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = (np.sum(a.data, axis=axes, dtype=np.float64) / n).astype(a.dtype)
    keep = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def _bw(g):
        return (np.broadcast_to(g.reshape(keep) / a.dtype.type(n), a.shape),)

    return _make(out, (a,), _bw, "mean", a.dtype)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape", a.dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    a64, b64 = a.data.astype(np.float64), b.data.astype(np.float64)
    out = (a64 @ b64).astype(a.dtype)

    def _bw(g):
        g64 = g.astype(np.float64)
        return (g64 @ b64.T, a64.T @ g64)

    return _make(out, (a, b), _bw, "matmul", a.dtype)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias (axis 1) to an ``(N, C, ...)`` tensor."""
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match channels of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))

    def _bw(g):
        return (g, np.sum(g, axis=axes, dtype=np.float64))

    return _make(x.data + b.data.reshape(view), (x, b), _bw, "add_bias", x.dtype)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate ``(B, C_i, H, W)`` tensors along the channel axis."""
    first = tensors[0]
    for t in tensors[1:]:
        if t.ndim != first.ndim or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise DimensionError(f"concat_channels: {first.shape} vs {t.shape}")
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=1)

    def _bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _make(out, tuple(tensors), _bw, "concat", first.dtype)


def softmax(z: Tensor, temperature: float = 1.0, axis: int = 1) -> Tensor:
    """Softmax of ``z / temperature`` along ``axis`` with max subtraction."""
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    x = z.data.astype(np.float64) / temperature
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    p64 = e / e.sum(axis=axis, keepdims=True)
    p = p64.astype(z.dtype)

    def _bw(g):
        g64 = g.astype(np.float64)
        dot = np.sum(g64 * p64, axis=axis, keepdims=True)
        return (p64 * (g64 - dot) / temperature,)

    return _make(p, (z,), _bw, "softmax", z.dtype)


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad_h: int, pad_w: int,
            Ho: int, Wo: int) -> np.ndarray:
    """``(B, C, H, W)`` -> float64 patch matrix ``(B*Ho*Wo, kh*kw*C)``, columns ordered (i, j, c)."""
    B, C, H, W = x.shape
    xp = np.zeros((B, H + 2 * pad_h, W + 2 * pad_w, C), dtype=np.float64)
    xp[:, pad_h:pad_h + H, pad_w:pad_w + W, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :]
    return cols.reshape(B * Ho * Wo, kh * kw * C)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation of ``(B, C, H, W)`` with ``(D, C, k, k)``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    D, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"conv2d: input channels {x.shape} do not match kernel {w.shape}")
    if stride < 1:
        raise ContractError(f"conv2d: stride must be >= 1, got {stride}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if kh > Hp or kw > Wp:
        raise DimensionError(f"conv2d: kernel {w.shape} larger than padded input {(B, C, Hp, Wp)}")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1

    cols = _im2col(x.data, kh, kw, stride, pad, pad, Ho, Wo)
    w64 = w.data.astype(np.float64)
    wmat = w64.transpose(0, 2, 3, 1).reshape(D, kh * kw * C)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, D).transpose(0, 3, 1, 2)

    def _bw(g):
        g64 = g.astype(np.float64)
        gmat = g64.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, D)
        dw = (gmat.T @ cols).reshape(D, kh, kw, C).transpose(0, 3, 1, 2)
        dx = None
        if x.requires_grad and stride == 1 and pad <= min(kh, kw) - 1:
            # full correlation of the gradient with the flipped kernel; avoids the col2im scatter
            gcols = _im2col(g64, kh, kw, 1, kh - 1 - pad, kw - 1 - pad, H, W)
            wflip = w64[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(C, kh * kw * D)
            dx = (gcols @ wflip.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        elif x.requires_grad:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, kh, kw, C).transpose(0, 5, 1, 2, 3, 4)
            dxp = np.zeros((B, C, Hp, Wp), dtype=np.float64)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[..., i, j]
            dx = dxp[:, :, pad:pad + H, pad:pad + W]
        return (dx, dw)

    return _make(np.ascontiguousarray(out).astype(x.dtype), (x, w), _bw, "conv2d", x.dtype)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; H and W must be divisible by ``size``."""
    B, C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"max_pool2d: {x.shape} not divisible by {size}")
    blocks = x.data.reshape(B, C, H // size, size, W // size, size).transpose(0, 1, 2, 4, 3, 5)
    flat = blocks.reshape(B, C, H // size, W // size, size * size)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g[..., None], axis=-1)
        gx = gflat.reshape(B, C, H // size, W // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(B, C, H, W),)

    return _make(out, (x,), _bw, "max_pool2d", x.dtype)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % size or W % size:
        raise DimensionError(f"avg_pool2d: {x.shape} not divisible by {size}")
    r = x.data.reshape(B, C, H // size, size, W // size, size)
    out = (r.astype(np.float64).mean(axis=(3, 5))).astype(x.dtype)

    def _bw(g):
        gg = np.repeat(np.repeat(g, size, axis=2), size, axis=3)
        return (gg / x.dtype.type(size * size),)

    return _make(out, (x,), _bw, "avg_pool2d", x.dtype)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def _bw(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5), dtype=np.float64),)

    return _make(out, (x,), _bw, "upsample", x.dtype)


def global_avg_pool(x: Tensor) -> Tensor:
    """``(B, C, H, W) -> (B, C)``."""
    return mean(x, axis=(2, 3))


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def numeric_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-4,
                 indices: Iterable[tuple[int, ...]] | None = None) -> dict[tuple[int, ...], float]:
    """Central differences of the scalar ``f()`` w.r.t. entries of ``t`` (mutated in place)."""
    if indices is None:
        indices = list(np.ndindex(*t.shape))
    out = {}
    for idx in indices:
        orig = t.data[idx].copy()
        t.data[idx] = orig + h
        fp = f().item()
        t.data[idx] = orig - h
        fm = f().item()
        t.data[idx] = orig
        out[tuple(idx)] = (fp - fm) / (2 * h)
    return out


class GradcheckResult(NamedTuple):
    worst: float  # largest relative error over the checked entries
    checked: int
    skipped: int  # entries whose difference stencil straddled a kink


def _smooth_at(f: Callable[[], Tensor], t: Tensor, idx, h: float, n: float, tol: float) -> bool:
    fine = numeric_grad(f, t, h / 10, [idx])[tuple(idx)]
    return abs(fine - n) <= tol * max(abs(fine), abs(n), 1e-6)


def gradcheck_stats(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
                    n_points: int = 10, rng: np.random.Generator | None = None,
                    skip_kinks: bool = False, kink_tol: float = 1e-3) -> GradcheckResult:
    """Compare analytic and central-difference gradients on ``n_points`` random entries per input.

    Relative error is ``|a - n| / max(|a|, |n|, 1e-6)``, so gradients that are
    zero on both routes count as exact matches.  Piecewise-linear ops (relu,
    max pooling) have no derivative at their kinks; with ``skip_kinks`` an
    entry whose estimate at ``h`` disagrees with the one at ``h / 10`` is taken
    to straddle a kink and another entry is drawn in its place.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    backward(f())
    worst, checked, skipped = 0.0, 0, 0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        order = rng.permutation(t.size) if skip_kinks else rng.choice(t.size, size=min(n_points, t.size),
                                                                       replace=False)
        done = 0
        for k in order:
            if done == n_points:
                break
            idx = np.unravel_index(int(k), t.shape)
            n = numeric_grad(f, t, h, [idx])[tuple(idx)]
            if skip_kinks and not _smooth_at(f, t, idx, h, n, kink_tol):
                skipped += 1
                continue
            a = float(analytic[idx])
            worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-6))
            done += 1
        checked += done
    return GradcheckResult(worst, checked, skipped)


def gradcheck(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-4,
              n_points: int = 10, rng: np.random.Generator | None = None, skip_kinks: bool = False) -> float:
    """Largest relative error between analytic and central-difference gradients (see ``gradcheck_stats``)."""
    return gradcheck_stats(f, inputs, h, n_points, rng, skip_kinks).worst
