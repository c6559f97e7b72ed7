"""
Reverse-mode automatic differentiation over numpy arrays.

Define-by-run: every op on a Tensor records its parents and a vector-Jacobian
product (vjp). Backward rules are themselves written with Tensor ops, so
gradients can be recorded and differentiated again (create_graph=True), which
the gradient penalty needs.

Contents:
  • Tensor / Parameter     — differentiable arrays, trainable leaves with Adam state
  • backward / grad        — reverse accumulation into leaves, or gradients of chosen inputs
  • primitives             — arithmetic, reductions, shape ops, einsum, activations
  • conv / batch_norm / glu / dropout — layer kernels used by the networks
  • Adam / adam_step       — bias-corrected Adam
  • numerical_gradient / gradcheck — central-difference checks

Environment variables:
  VCLAB_PRECISION=f32|f64     — precision of new tensors (default f64)
  VCLAB_CHECK_FINITE=false    — disable NaN/Inf detection at op boundaries
"""

from __future__ import annotations

import contextlib
import itertools
import os
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse, special

# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

_PRECISIONS = {"f32": np.float32, "f64": np.float64}


def _resolve_precision(name: str) -> np.dtype:
    key = name.strip().lower()
    if key not in _PRECISIONS:
        raise ValueError(f"Unknown precision '{name}'. Use one of: {sorted(_PRECISIONS)}")
    return np.dtype(_PRECISIONS[key])


_DTYPE: np.dtype = _resolve_precision(os.environ.get("VCLAB_PRECISION", "f64") or "f64")
CHECK_FINITE = os.environ.get("VCLAB_CHECK_FINITE", "true").lower() not in ("0", "false", "no")

_grad_enabled = True
_node_ids = itertools.count()


def default_dtype() -> np.dtype:
    return _DTYPE


def set_precision(name: str) -> None:
    """Set the precision used for tensors created from now on."""
    global _DTYPE
    _DTYPE = _resolve_precision(name)


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    global _DTYPE
    previous = _DTYPE
    _DTYPE = _resolve_precision(name)
    try:
        yield
    finally:
        _DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Ops inside this block are not recorded."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class NumericalError(ArithmeticError):
    """Raised when a NaN or Inf shows up at an op boundary or in a gradient."""


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """Differentiable n-d array. ``values`` is a numpy array; ``grad`` is filled by backward()."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str = "", op: str = "leaf"):
        arr = np.asarray(values, dtype=_DTYPE)
        if CHECK_FINITE and not np.isfinite(arr).all():
            where = f"'{name}'" if name else f"op '{op}'"
            raise NumericalError(f"Non-finite value produced by {where} (shape {arr.shape})")
        self.values: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Tensor], Sequence[Tensor | None]] | None = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def abs(self) -> Tensor:
        return tabs(self)

    def backward(self) -> dict[int, np.ndarray]:
        return backward(self)


class Parameter(Tensor):
    """Trainable leaf tensor carrying its Adam moments and step counter."""

    def __init__(self, values, name: str = ""):
        super().__init__(values, requires_grad=True, name=name)
        self.m = np.zeros_like(self.values)
        self.v = np.zeros_like(self.values)
        self.step = 0

    def assign(self, values: np.ndarray) -> None:
        arr = np.asarray(values, dtype=self.values.dtype)
        if arr.shape != self.values.shape:
            raise ShapeError(f"Cannot assign shape {arr.shape} to parameter '{self.name}' of shape {self.shape}")
        self.values = arr.copy()


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(values: np.ndarray, parents: tuple[Tensor, ...], vjp, op: str) -> Tensor:
    out = Tensor(values, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------


def _sum_to_values(v: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if v.shape == shape:
        return v
    lead = v.ndim - len(shape)
    if lead > 0:
        v = v.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and v.shape[i] != 1)
    if axes:
        v = v.sum(axis=axes, keepdims=True)
    return v


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape``; the adjoint of broadcast_to."""
    shape = tuple(shape)
    if x.shape == shape:
        return x

    def vjp(g):
        return (broadcast_to(g, x.shape),)

    return _result(_sum_to_values(x.values, shape), (x,), vjp, "sum_to")


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        values = np.broadcast_to(x.values, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"Cannot broadcast {x.shape} to {shape}") from exc

    def vjp(g):
        return (sum_to(g, x.shape),)

    return _result(values, (x,), vjp, "broadcast_to")


def _broadcast_shapes(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "add")

    def vjp(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _result(a.values + b.values, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "sub")

    def vjp(g):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)

    return _result(a.values - b.values, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "mul")

    def vjp(g):
        return (
            sum_to(g * b, a.shape) if a.requires_grad else None,
            sum_to(g * a, b.shape) if b.requires_grad else None,
        )

    return _result(a.values * b.values, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b, "div")

    def vjp(g):
        return (
            sum_to(g / b, a.shape) if a.requires_grad else None,
            sum_to(neg(g * a) / (b * b), b.shape) if b.requires_grad else None,
        )

    with np.errstate(divide="ignore", invalid="ignore"):
        values = a.values / b.values
    return _result(values, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (neg(g),)

    return _result(-a.values, (a,), vjp, "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    c = float(exponent)

    def vjp(g):
        return (g * (c * power(a, c - 1.0)),)

    with np.errstate(divide="ignore", invalid="ignore"):
        values = a.values**c
    return _result(values, (a,), vjp, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g * out,)

    out = _result(np.exp(a.values), (a,), vjp, "exp")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g / a,)

    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.log(a.values)
    return _result(values, (a,), vjp, "log")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g * out * (1.0 - out),)

    out = _result(special.expit(a.values), (a,), vjp, "sigmoid")
    return out


def softplus(a) -> Tensor:
    """log(1 + e^a), computed without overflow."""
    a = as_tensor(a)

    def vjp(g):
        return (g * sigmoid(a),)

    return _result(np.logaddexp(0.0, a.values), (a,), vjp, "softplus")


def log_sigmoid(a) -> Tensor:
    return neg(softplus(neg(a)))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.values)

    def vjp(g):
        return (g * sign,)

    return _result(np.abs(a.values), (a,), vjp, "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where the value was inside the range."""
    a = as_tensor(a)
    inside = ((a.values >= lo) & (a.values <= hi)).astype(a.dtype)

    def vjp(g):
        return (g * inside,)

    return _result(np.clip(a.values, lo, hi), (a,), vjp, "clip")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _expand_reduced(g: Tensor, axes: tuple[int, ...], shape: tuple[int, ...], keepdims: bool) -> Tensor:
    if not keepdims:
        kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
        g = reshape(g, kept)
    return broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def vjp(g):
        return (_expand_reduced(g, axes, a.shape, keepdims),)

    return _result(np.sum(a.values, axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def logsumexp(a, axis: int, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shift = np.max(a.values, axis=axis, keepdims=True)
    out = log(tsum(exp(a - shift), axis, keepdims=True)) + shift
    return out if keepdims else reshape(out, tuple(n for i, n in enumerate(out.shape) if i != axis % a.ndim))


def log_softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    shifted = a - np.max(a.values, axis=axis, keepdims=True)
    return shifted - log(tsum(exp(shifted), axis, keepdims=True))


def l2_norm(a, axis=None) -> Tensor:
    """Euclidean norm over ``axis``; the gradient at a zero vector is taken as zero."""
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def vjp(g):
        at_zero = (out.values == 0).astype(a.dtype)
        scale = g / (out + at_zero)
        return (_expand_reduced(scale, axes, a.shape, False) * a,)

    out = _result(np.sqrt(np.sum(a.values**2, axis=axes)), (a,), vjp, "l2_norm")
    return out


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        values = a.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"Cannot reshape {a.shape} to {shape}") from exc

    def vjp(g):
        return (reshape(g, a.shape),)

    return _result(values, (a,), vjp, "reshape")


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def vjp(g):
        return (transpose(g, inverse),)

    return _result(np.transpose(a.values, axes), (a,), vjp, "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(Ellipsis), type(None))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (scatter(g, index, a.shape),)

    return _result(np.array(a.values[index]), (a,), vjp, "getitem")


def scatter(g, index, shape: tuple[int, ...]) -> Tensor:
    """Zeros of ``shape`` with ``g`` added at ``index``; the adjoint of getitem."""
    g = as_tensor(g)
    values = np.zeros(shape, dtype=g.dtype)
    if _is_basic_index(index):
        values[index] = g.values
    else:
        np.add.at(values, index, g.values)

    def vjp(gg):
        return (getitem(gg, index),)

    return _result(values, (g,), vjp, "scatter")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        values = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in tensors]} along axis {axis}") from exc
    ax = axis % values.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        pieces = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[ax] = slice(int(lo), int(hi))
            pieces.append(getitem(g, tuple(index)))
        return tuple(pieces)

    return _result(values, tuple(tensors), vjp, "concat")


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum without ellipses; every input index must reach the output or the other operand."""
    a, b = as_tensor(a), as_tensor(b)
    inputs, out_spec = subscripts.replace(" ", "").split("->")
    spec_a, spec_b = inputs.split(",")
    try:
        values = np.einsum(subscripts, a.values, b.values, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum '{subscripts}': {a.shape} and {b.shape}") from exc

    def vjp(g):
        return (
            einsum(f"{out_spec},{spec_b}->{spec_a}", g, b) if a.requires_grad else None,
            einsum(f"{spec_a},{out_spec}->{spec_b}", a, g) if b.requires_grad else None,
        )

    return _result(values, (a, b), vjp, "einsum")


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    """Parents before children. Iterative DFS; a back edge means a cycle."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise RuntimeError("Computation graph contains a cycle")
        state[key] = 1
        stack.append((node, True))
        for parent in node._parents:
            pmark = state.get(id(parent))
            if pmark == 1:
                raise RuntimeError("Computation graph contains a cycle")
            if pmark is None and parent.requires_grad:
                stack.append((parent, False))
    return order


def _propagate(root: Tensor, seed: Tensor, keep: set[int]) -> dict[int, Tensor]:
    """Run vjps from root to leaves; returns accumulated gradients for ``keep`` and for leaves."""
    order = _topological_order(root)
    grads: dict[int, Tensor] = {id(root): seed}
    kept: dict[int, Tensor] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if id(node) in keep or node._vjp is None:
            kept[id(node)] = g
        if node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return kept


def backward(root: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(root)/d(leaf) into every tracked leaf's ``.grad``.

    Returns {node_id: gradient} for the leaves reached. Calling twice without
    zeroing the grads accumulates.
    """
    if root.size != 1:
        raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    with no_grad():
        seed = Tensor(np.ones_like(root.values))
        kept = _propagate(root, seed, set())
    leaves = {t.node_id: t for t in _topological_order(root) if t._vjp is None}
    out: dict[int, np.ndarray] = {}
    for leaf in leaves.values():
        g = kept.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.values.copy() if leaf.grad is None else leaf.grad + g.values
        out[leaf.node_id] = leaf.grad
    return out


def grad(
    root: Tensor,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of scalar ``root`` w.r.t. ``inputs`` (zeros where unreachable).

    With create_graph=True the returned tensors are themselves tracked.
    Leaf ``.grad`` fields are not touched.
    """
    if root.size != 1:
        raise ShapeError(f"grad() needs a scalar root, got shape {root.shape}")
    if create_graph and not _grad_enabled:
        raise RuntimeError("grad(create_graph=True) inside no_grad(): the gradient would be detached")
    keep = {id(t) for t in inputs}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        seed = Tensor(np.ones_like(root.values))
        kept = _propagate(root, seed, keep) if root.requires_grad else {}
    result = []
    for t in inputs:
        g = kept.get(id(t))
        result.append(g if g is not None else Tensor(np.zeros_like(t.values)))
    return result


# ---------------------------------------------------------------------------
# Convolution via cached sparse patch maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PatchMap:
    """Sparse (P·K × S) 0/1 matrix picking every kernel tap of every output position.

    Rows whose tap falls in the zero padding are empty.
    """

    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    kernel: tuple[int, ...]
    matrix: sparse.csr_matrix = field(compare=False)

    @property
    def n_out(self) -> int:
        return int(np.prod(self.out_shape))

    @property
    def n_taps(self) -> int:
        return int(np.prod(self.kernel))

    @property
    def n_in(self) -> int:
        return int(np.prod(self.in_shape))


def conv_output_shape(
    in_shape: Sequence[int], kernel: Sequence[int], stride: Sequence[int], padding: Sequence[int]
) -> tuple[int, ...]:
    return tuple((n + 2 * p - k) // s + 1 for n, k, s, p in zip(in_shape, kernel, stride, padding))


def conv_transpose_output_shape(
    in_shape: Sequence[int], kernel: Sequence[int], stride: Sequence[int], padding: Sequence[int]
) -> tuple[int, ...]:
    return tuple((n - 1) * s - 2 * p + k for n, k, s, p in zip(in_shape, kernel, stride, padding))


@lru_cache(maxsize=256)
def patch_map(
    in_shape: tuple[int, ...],
    kernel: tuple[int, ...],
    stride: tuple[int, ...],
    padding: tuple[int, ...],
    dtype: str,
) -> PatchMap:
    out_shape = conv_output_shape(in_shape, kernel, stride, padding)
    if any(n <= 0 for n in out_shape):
        raise ShapeError(f"Empty convolution output for input {in_shape}, kernel {kernel}, stride {stride}")
    rank = len(in_shape)
    out_idx = np.stack(np.meshgrid(*[np.arange(n) for n in out_shape], indexing="ij"), -1).reshape(-1, rank)
    tap_idx = np.stack(np.meshgrid(*[np.arange(k) for k in kernel], indexing="ij"), -1).reshape(-1, rank)
    # (P, K, rank) input coordinates of every tap
    coords = out_idx[:, None, :] * np.asarray(stride) - np.asarray(padding) + tap_idx[None, :, :]
    valid = np.all((coords >= 0) & (coords < np.asarray(in_shape)), axis=-1)
    n_out, n_taps = out_idx.shape[0], tap_idx.shape[0]
    rows = np.arange(n_out * n_taps).reshape(n_out, n_taps)[valid]
    cols = np.ravel_multi_index(tuple(coords[valid].T), in_shape)
    data = np.ones(rows.size, dtype=dtype)
    matrix = sparse.csr_matrix((data, (rows, cols)), shape=(n_out * n_taps, int(np.prod(in_shape))))
    return PatchMap(tuple(in_shape), out_shape, tuple(kernel), matrix)


def gather_patches(x: Tensor, pm: PatchMap) -> Tensor:
    """(B, C, S) → (B, C, P, K) by patch lookup (zeros at padding)."""
    b, c, s = x.shape
    if s != pm.n_in:
        raise ShapeError(f"gather_patches: input has {s} positions, map expects {pm.n_in}")

    def vjp(g):
        return (scatter_patches(g, pm),)

    cols = pm.matrix @ x.values.reshape(b * c, s).T
    values = np.ascontiguousarray(np.asarray(cols).T).reshape(b, c, pm.n_out, pm.n_taps)
    return _result(values, (x,), vjp, "gather_patches")


def scatter_patches(g: Tensor, pm: PatchMap) -> Tensor:
    """(B, C, P, K) → (B, C, S) by summing every tap back onto its input position."""
    b, c, p, k = g.shape

    def vjp(gg):
        return (gather_patches(gg, pm),)

    acc = pm.matrix.T @ g.values.reshape(b * c, p * k).T
    values = np.ascontiguousarray(np.asarray(acc).T).reshape(b, c, pm.n_in)
    return _result(values, (g,), vjp, "scatter_patches")


def _per_axis(value: int | Sequence[int], rank: int, what: str) -> tuple[int, ...]:
    items = (value,) * rank if isinstance(value, (int, np.integer)) else tuple(value)
    if len(items) != rank:
        raise ShapeError(f"{what} needs {rank} entries, got {items}")
    return tuple(int(v) for v in items)


def conv(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor | None = None,
    stride: int | Sequence[int] = 1,
    padding: int | Sequence[int] = 0,
    transposed: bool = False,
    rank: int = 1,
) -> Tensor:
    """Cross-correlation over ``rank`` trailing axes, or its transpose.

    x: (B, C_in, *spatial). kernel: (C_out, C_in, *k) forward, (C_in, C_out, *k) transposed.
    Forward size: floor((n + 2p − k)/s) + 1. Transposed size: (n − 1)s − 2p + k.
    """
    if rank not in (1, 2):
        raise ShapeError(f"conv rank must be 1 or 2, got {rank}")
    if x.ndim != rank + 2 or kernel.ndim != rank + 2:
        raise ShapeError(f"conv{rank}d: input {x.shape} / kernel {kernel.shape} have wrong rank")
    stride = _per_axis(stride, rank, "stride")
    padding = _per_axis(padding, rank, "padding")
    k_shape = kernel.shape[2:]
    n_taps = int(np.prod(k_shape))
    batch, c_in = x.shape[:2]
    spatial = x.shape[2:]
    dtype = np.dtype(x.dtype).str

    if not transposed:
        c_out, k_in = kernel.shape[:2]
        if k_in != c_in:
            raise ShapeError(f"conv{rank}d: input has {c_in} channels, kernel expects {k_in}")
        pm = patch_map(tuple(spatial), tuple(k_shape), stride, padding, dtype)
        cols = gather_patches(reshape(x, (batch, c_in, pm.n_in)), pm)
        out = einsum("bcpk,ock->bop", cols, reshape(kernel, (c_out, c_in, n_taps)))
        out = reshape(out, (batch, c_out, *pm.out_shape))
    else:
        k_in, c_out = kernel.shape[:2]
        if k_in != c_in:
            raise ShapeError(f"deconv{rank}d: input has {c_in} channels, kernel expects {k_in}")
        out_spatial = conv_transpose_output_shape(spatial, k_shape, stride, padding)
        if any(n <= 0 for n in out_spatial):
            raise ShapeError(f"deconv{rank}d: empty output for input {spatial}")
        pm = patch_map(tuple(out_spatial), tuple(k_shape), stride, padding, dtype)
        if pm.out_shape != tuple(spatial):
            raise ShapeError(f"deconv{rank}d: geometry of {out_spatial} does not map back onto {spatial}")
        taps = einsum("bip,iok->bopk", reshape(x, (batch, c_in, pm.n_out)), reshape(kernel, (c_in, c_out, n_taps)))
        out = reshape(scatter_patches(taps, pm), (batch, c_out, *out_spatial))

    if bias is not None:
        out = out + reshape(bias, (1, -1) + (1,) * rank)
    return out


# ---------------------------------------------------------------------------
# Normalization, gating, dropout
# ---------------------------------------------------------------------------

BATCH_NORM_EPS = 1e-5


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    axes: Sequence[int],
    eps: float = BATCH_NORM_EPS,
    require_batch: bool = True,
) -> Tensor:
    """Normalize over ``axes`` with current-batch statistics, then scale and shift.

    Statistics always come from the batch at hand, at training and at test time.
    """
    if require_batch and x.shape[0] < 2:
        raise ShapeError("batch_norm with batch statistics needs a batch of at least 2")
    axes = tuple(axes)
    mu = mean(x, axes, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axes, keepdims=True)
    return centered / power(var + eps, 0.5) * scale + shift


def glu(x: Tensor, axis: int = 1) -> Tensor:
    """X₁ ⊙ sigmoid(X₂) over the two channel halves."""
    channels = x.shape[axis]
    if channels % 2:
        raise ShapeError(f"glu needs an even channel count, got {channels}")
    half = channels // 2
    first = [slice(None)] * x.ndim
    second = [slice(None)] * x.ndim
    first[axis] = slice(0, half)
    second[axis] = slice(half, channels)
    return getitem(x, tuple(first)) * sigmoid(getitem(x, tuple(second)))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability p, rescale survivors by 1/(1−p)."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return x * keep


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


def adam_step(
    params: Sequence[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update using each parameter's ``.grad`` (missing grad = 0).

    Nothing is updated if any gradient is non-finite.
    """
    for p in params:
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise NumericalError(f"Non-finite gradient for parameter '{p.name}'; step aborted")
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.values)
        p.step += 1
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1**p.step)
        v_hat = p.v / (1.0 - beta2**p.step)
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Adam:
    params: list[Parameter]
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# Finite-difference checks
# ---------------------------------------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar fn() w.r.t. every element of ``tensor`` (perturbed in place).

    fn() runs with recording on: losses that differentiate internally (gradient penalty) need it.
    """
    out = np.zeros_like(tensor.values, dtype=np.float64)
    flat = tensor.values.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn().item()
        flat[i] = orig - h
        down = fn().item()
        flat[i] = orig
        out.reshape(-1)[i] = (up - down) / (2.0 * h)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradcheck(fn: Callable[[], Tensor], tensors: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between analytic and central-difference gradients."""
    root = fn()
    analytic = grad(root, list(tensors))
    worst = 0.0
    for t, g in zip(tensors, analytic):
        worst = max(worst, relative_error(g.values, numerical_gradient(fn, t, h)))
    return worst
