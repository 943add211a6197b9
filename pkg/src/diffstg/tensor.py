"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive below computes its result with numpy and, when a :class:`Tape`
is active and at least one input requires gradients, records a backward rule
on that tape. Broadcasting is never implicit: elementwise primitives demand
identical shapes and :func:`broadcast_to` must be called explicitly.
"""
from __future__ import annotations

import builtins
import contextlib
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

_DEFAULT_DTYPE = np.float32
_TAPES: list["Tape"] = []


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype used for new tensors (e.g. float64 for gradient checks)."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense row-major array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_leaf", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr if arr.flags.c_contiguous else arr.copy()     # keeps 0-d shape
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {list(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other, self))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other, self))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class Tape:
    """Ordered record of primitive applications, replayed in reverse by :meth:`backward`.

    Use as a context manager around the forward pass; one tape per training step.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        out.requires_grad = True
        out._tape = self
        out._leaf = False
        self.records.append((out, inputs, rule))

    def clear(self) -> None:
        self.records.clear()

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
        if not self.records:
            raise RuntimeError("backward called on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, rule in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, rule(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._leaf:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every leaf reachable from ``loss``."""
    if loss._tape is None:
        raise RuntimeError("loss was not recorded on a tape")
    loss._tape.backward(loss)


def _active_tape(inputs: Iterable[Tensor]) -> Tape | None:
    if not _TAPES:
        return None
    if any(t.requires_grad for t in inputs):
        return _TAPES[-1]
    return None


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._tape = None
    out._leaf = True
    out.name = None
    tape = _active_tape(inputs)
    if tape is not None:
        tape.record(out, inputs, rule)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    return _emit(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _emit(y, (a,), lambda g: (g * y * (1 - y),))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _emit(np.where(pos, a.data, 0).astype(a.dtype, copy=False), (a,), lambda g: (g * pos,))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands share identical leading (batch) axes, or one of them
    is a plain 2-D matrix applied to every batch entry of the other. Any other
    combination is rejected.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need rank >= 2, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {list(a.shape)} @ {list(b.shape)}")
    if not (a.ndim == 2 or b.ndim == 2 or a.shape[:-2] == b.shape[:-2]):
        raise ShapeError(f"matmul: batch dims differ, {list(a.shape)} @ {list(b.shape)}")
    ad, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        # one large GEMM instead of a stack of small ones
        k, n = bd.shape
        a2 = ad.reshape(-1, k)

        def rule(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(a.shape) if a.requires_grad else None
            return ga, (a2.T @ g2 if b.requires_grad else None)

        return _emit((a2 @ bd).reshape(a.shape[:-1] + (n,)), (a, b), rule)

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bd, -1, -2)
            if a.ndim == 2 and ga.ndim > 2:
                ga = ga.reshape(-1, *a.shape).sum(axis=0)
        if b.requires_grad:
            gb = np.swapaxes(ad, -1, -2) @ g
            if b.ndim == 2 and gb.ndim > 2:
                gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _emit(ad @ bd, (a, b), rule)


def causal_conv1d(x: Tensor, w: Tensor, pad_left: int | None = None) -> Tensor:
    """1-D convolution along axis -2 with channels last.

    ``x`` is ``[..., T, C_in]`` and ``w`` is ``[K, C_in, C_out]``. The input is
    left-padded with ``pad_left`` zeros (default ``K - 1``) so output step t
    only sees input steps <= t. Output length is ``T + pad_left - K + 1``.
    """
    if w.ndim != 3 or x.ndim < 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"causal_conv1d: input {list(x.shape)} incompatible with kernel {list(w.shape)}")
    K, cin, cout = w.shape
    p = K - 1 if pad_left is None else pad_left
    T = x.shape[-2]
    t_out = T + p - K + 1
    if t_out < 1 or p < 0:
        raise ShapeError(f"causal_conv1d: kernel {K} with padding {p} too long for length {T}")
    lead = x.shape[:-2]
    xp = np.zeros(lead + (T + p, cin), dtype=x.dtype)
    xp[..., p:, :] = x.data
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=-2)  # [..., t_out, cin, K]
    cols = np.swapaxes(cols, -1, -2).reshape(-1, K * cin)
    wflat = w.data.reshape(K * cin, cout)
    out = (cols @ wflat).reshape(lead + (t_out, cout))

    def rule(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(K, cin, cout) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        gcols = (g2 @ wflat.T).reshape(lead + (t_out, K, cin))
        gxp = np.zeros_like(xp)
        for k in range(K):
            gxp[..., k:k + t_out, :] += gcols[..., k, :]
        return gxp[..., p:, :], gw

    return _emit(out, (x, w), rule)


# -- shape manipulation ------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {list(old)} as {list(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                 lambda g: (np.ascontiguousarray(g.transpose(inv)),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Expand size-1 axes of ``a`` to ``shape``; ranks must already match."""
    shape = tuple(shape)
    if a.ndim != len(shape) or any(s not in (1, t) for s, t in zip(a.shape, shape)):
        raise ShapeError(f"broadcast_to: cannot expand {list(a.shape)} to {list(shape)}")
    axes = tuple(i for i, (s, t) in enumerate(zip(a.shape, shape)) if s == 1 and t != 1)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _emit(out, (a,), lambda g: (g.sum(axis=axes, keepdims=True),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref.shape)) if i != ax):
            raise ShapeError(f"concat: shapes {list(ref.shape)} and {list(t.shape)} differ off axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def rule(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return _emit(np.concatenate([t.data for t in tensors], axis=ax), tensors, rule)


def slice_axis(a: Tensor, start: int, stop: int, axis: int) -> Tensor:
    ax = axis % a.ndim
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice_axis: [{start}:{stop}] out of range for axis {ax} of {list(a.shape)}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def rule(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit(np.ascontiguousarray(a.data[index]), (a,), rule)


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if builtins.sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not sum to axis length {a.shape[axis]}")
    out, start = [], 0
    for s in sizes:
        out.append(slice_axis(a, start, start + s, axis))
        start += s
    return out


def subsample(a: Tensor, axis: int, stride: int = 2, offset: int | None = None) -> Tensor:
    """Keep every ``stride``-th entry along ``axis``, starting at ``offset`` (default ``stride - 1``)."""
    ax = axis % a.ndim
    off = stride - 1 if offset is None else offset
    if a.shape[ax] % stride:
        raise ShapeError(f"subsample: axis length {a.shape[ax]} not divisible by {stride}")
    index = [slice(None)] * a.ndim
    index[ax] = slice(off, None, stride)
    index = tuple(index)

    def rule(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _emit(np.ascontiguousarray(a.data[index]), (a,), rule)


def subsample_transpose(a: Tensor, axis: int, stride: int = 2, offset: int | None = None) -> Tensor:
    """Adjoint of :func:`subsample`: scatter entries back with zeros in between."""
    ax = axis % a.ndim
    off = stride - 1 if offset is None else offset
    shape = list(a.shape)
    shape[ax] *= stride
    index = [slice(None)] * a.ndim
    index[ax] = slice(off, None, stride)
    index = tuple(index)
    out = np.zeros(shape, dtype=a.dtype)
    out[index] = a.data
    return _emit(out, (a,), lambda g: (np.ascontiguousarray(g[index]),))


def repeat(a: Tensor, times: int, axis: int) -> Tensor:
    """Nearest-neighbour upsampling: each entry along ``axis`` repeated ``times`` times."""
    ax = axis % a.ndim
    n = a.shape[ax]

    def rule(g):
        shape = g.shape[:ax] + (n, times) + g.shape[ax + 1:]
        return (g.reshape(shape).sum(axis=ax + 1),)

    return _emit(np.repeat(a.data, times, axis=ax), (a,), rule)


# -- reductions ----------------------------------------------------------------

def sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), rule)


def mean(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- serialization -------------------------------------------------------------

def save_tensor(t: Tensor | np.ndarray, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.f32`` (little-endian float32, row-major) and a ``<stem>.shape`` sidecar."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    stem = Path(stem)
    bin_path = stem.with_name(stem.name + ".f32")
    hdr_path = stem.with_name(stem.name + ".shape")
    hdr_path.write_text("shape: " + ",".join(str(d) for d in arr.shape) + "\n")
    np.ascontiguousarray(arr, dtype="<f4").tofile(bin_path)
    return bin_path, hdr_path


def load_tensor(stem: str | Path, dtype=None) -> Tensor:
    stem = Path(stem)
    header = stem.with_name(stem.name + ".shape").read_text().splitlines()[0]
    if not header.startswith("shape:"):
        raise ValueError(f"{stem}.shape: expected a 'shape:' header, got {header!r}")
    dims = header.split(":", 1)[1].strip()
    shape = tuple(int(d) for d in dims.split(",")) if dims else ()
    flat = np.fromfile(stem.with_name(stem.name + ".f32"), dtype="<f4")
    if flat.size != int(np.prod(shape)):
        raise ValueError(f"{stem}: header shape {list(shape)} does not match {flat.size} stored values")
    return Tensor(flat.reshape(shape), dtype=dtype)


# -- finite differences ----------------------------------------------------------

def finite_difference_grad(f: Callable[[], float], x: np.ndarray, step: float = 1e-6,
                           indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x``, mutated in place.

    Entries not listed in ``indices`` are left as NaN.
    """
    grad = np.full(x.shape, np.nan)
    idx = np.ndindex(*x.shape) if indices is None else indices
    for i in idx:
        orig = x[i]
        x[i] = orig + step
        fp = f()
        x[i] = orig - step
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad
