"""Dense tensors with define-by-run reverse-mode differentiation.

Only the operators used by the fusion stack are provided. Every op is a pure
function of immutable :class:`Tensor` values; when a :class:`Tape` is active on
the current thread and one of the inputs requires a gradient, the op appends a
node holding its vector-Jacobian product to that tape.

Example::

    w = Tensor(np.eye(2), requires_grad=True)
    with Tape() as tape:
        loss = total(matmul(x, w))
    grads = tape.backward(loss)
    grads[w]
"""

from __future__ import annotations

import dataclasses
import os
import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, ShapeError

_FLOAT_TYPES = (np.float32, np.float64)
_state = threading.local()
_DEBUG = os.environ.get("LATENTFUSION_DEBUG", "") not in ("", "0")


def set_debug(enabled: bool) -> None:
    """Toggle the finite-output check that runs after every op."""
    global _DEBUG
    _DEBUG = bool(enabled)


class Tensor:
    """Immutable n-d array of float32 or float64 values."""

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        if any(d <= 0 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.array(arr)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _not_scalar(t: Tensor) -> float:
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x: Any, dtype: Any = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# Tape and FLOP accounting


@dataclasses.dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of ops executed while the tape is active.

    Tapes are thread-confined: entering a tape makes it current only for the
    calling thread. Nested tapes are allowed; only the innermost records.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc: object) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        for t in inputs:
            if t.requires_grad and id(t) not in self._produced and id(t) not in self._leaves:
                self._leaves[id(t)] = t
        self._nodes.append(_Node(out, inputs, vjp))
        self._produced.add(id(out))

    def backward(self, output: Tensor) -> dict[Tensor, np.ndarray]:
        """Gradients of a single-element ``output`` w.r.t. every leaf input."""
        if output.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            result[leaf] = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
        if output.requires_grad and id(output) not in self._produced:
            result[output] = np.ones_like(output.data)
        return result


def backward(tape: Tape, output: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(output)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> Tape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class FlopCounter:
    """Accumulates an estimate of floating-point operations per op."""

    def __init__(self) -> None:
        self.total = 0
        self.by_op: dict[str, int] = {}

    def add(self, name: str, n: int) -> None:
        self.total += n
        self.by_op[name] = self.by_op.get(name, 0) + n


@contextmanager
def count_flops() -> Iterator[FlopCounter]:
    counter = FlopCounter()
    stack = getattr(_state, "counters", None)
    if stack is None:
        stack = _state.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _emit(name: str, data: np.ndarray, inputs: tuple[Tensor, ...], vjp, flops: int) -> Tensor:
    counters = getattr(_state, "counters", None)
    if counters:
        for c in counters:
            c.add(name, int(flops))
    if _DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{name} produced non-finite values from finite inputs")
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor._wrap(data, True)
        tape._record(out, inputs, vjp)
        return out
    return Tensor._wrap(data, False)


def _same_dtype(name: str, *ts: Tensor) -> None:
    if len({t.data.dtype for t in ts}) > 1:
        raise TypeError(f"{name}: mixed dtypes {[str(t.dtype) for t in ts]}")


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
    _same_dtype(name, a, b)


def _need_2d(name: str, x: Tensor) -> None:
    if x.data.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-d tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _need_2d("matmul", a)
    _need_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    _same_dtype("matmul", a, b)
    A, B = a.data, b.data

    def vjp(g):
        return (g @ B.T if a.requires_grad else None, A.T @ g if b.requires_grad else None)

    m, k = A.shape
    return _emit("matmul", A @ B, (a, b), vjp, 2 * m * k * B.shape[1])


def transpose(x: Tensor) -> Tensor:
    _need_2d("transpose", x)
    return _emit("transpose", np.ascontiguousarray(x.data.T), (x,), lambda g: (g.T,), 0)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Row-wise affine map ``x @ w + b``."""
    _need_2d("linear", x)
    _need_2d("linear", w)
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: input width {x.shape[1]} != weight rows {w.shape[0]}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
    _same_dtype("linear", x, w, *(() if b is None else (b,)))
    X, W = x.data, w.data
    out = X @ W
    if b is not None:
        out = out + b.data

    def vjp(g):
        return (
            g @ W.T if x.requires_grad else None,
            X.T @ g if w.requires_grad else None,
            g.sum(axis=0) if b is not None and b.requires_grad else None,
        )

    inputs = (x, w) if b is None else (x, w, b)
    n, k = X.shape
    return _emit("linear", out, inputs, vjp, 2 * n * k * W.shape[1] + (out.size if b is not None else 0))


def add_rows(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-C vector to every row of an N x C tensor."""
    _need_2d("add_rows", x)
    if b.shape != (x.shape[1],):
        raise ShapeError(f"add_rows: bias shape {b.shape} != ({x.shape[1]},)")
    _same_dtype("add_rows", x, b)
    return _emit("add_rows", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), x.data.size)


# ---------------------------------------------------------------------------
# Elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g), a.data.size)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g), a.data.size)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A), A.size)


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,), x.data.size)


def sigmoid(x: Tensor) -> Tensor:
    y = expit(x.data)
    return _emit("sigmoid", y, (x,), lambda g: (g * y * (1 - y),), 4 * y.size)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", y, (x,), lambda g: (g * (1 - y * y),), 4 * y.size)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, x.data.dtype.type(0))
    return _emit("relu", y, (x,), lambda g: (g * mask,), y.size)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    X = x.data
    e = np.exp(X - X.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), vjp, 5 * y.size)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean and unit variance (no affine terms)."""
    _need_2d("layer_norm", x)
    X = x.data
    mu = X.mean(axis=1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + X.dtype.type(eps))
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _emit("layer_norm", y, (x,), vjp, 8 * y.size)


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    shape = x.shape
    return _emit("total", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape),), x.data.size)


# ---------------------------------------------------------------------------
# Indexing and structure


def _check_index(idx: Any, n: int, name: str) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = idx[(idx < 0) | (idx >= n)][0]
        raise IndexError(f"{name}: index {bad} out of range [0, {n})")
    return idx


def gather_rows(x: Tensor, idx: Any) -> Tensor:
    n = x.shape[0]
    idx = _check_index(idx, n, "gather_rows")
    if idx.size == 0:
        raise ShapeError("gather_rows: empty index list")
    rest = x.shape[1:]

    def vjp(g):
        out = np.zeros((n,) + rest, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", x.data[idx], (x,), vjp, 0)


def scatter_add_rows(x: Tensor, idx: Any, out_rows: int) -> Tensor:
    idx = _check_index(idx, out_rows, "scatter_add_rows")
    if idx.size != x.shape[0]:
        raise ShapeError(f"scatter_add_rows: {idx.size} indices for {x.shape[0]} rows")
    out = np.zeros((out_rows,) + x.shape[1:], dtype=x.dtype)
    np.add.at(out, idx, x.data)
    return _emit("scatter_add_rows", out, (x,), lambda g: (g[idx],), x.data.size)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise ShapeError(f"concat_rows: trailing shapes differ {sorted(widths)}")
    _same_dtype("concat_rows", *parts)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit("concat_rows", np.concatenate([p.data for p in parts], axis=0), parts, vjp, 0)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _emit("reshape", y, (x,), lambda g: (g.reshape(old),), 0)


def scale_rows(x: Tensor, weights: Any) -> Tensor:
    """Multiply row i of ``x`` by the constant ``weights[i]``."""
    w = np.asarray(weights, dtype=x.dtype).reshape(-1)
    if w.size != x.shape[0]:
        raise ShapeError(f"scale_rows: {w.size} weights for {x.shape[0]} rows")
    w = w.reshape((-1,) + (1,) * (x.data.ndim - 1))
    return _emit("scale_rows", x.data * w, (x,), lambda g: (g * w,), x.data.size)


def segment_max(x: Tensor, segments: Any, num_segments: int) -> Tensor:
    """Row-wise max over groups of rows sharing a segment id.

    Every segment in ``[0, num_segments)`` must own at least one row. Ties
    route the gradient to the lowest row index.
    """
    _need_2d("segment_max", x)
    seg = _check_index(segments, num_segments, "segment_max")
    if seg.size != x.shape[0]:
        raise ShapeError(f"segment_max: {seg.size} segment ids for {x.shape[0]} rows")
    if np.unique(seg).size != num_segments:
        raise ContractError("segment_max: every segment needs at least one row")
    X = x.data
    out = np.full((num_segments, X.shape[1]), -np.inf, dtype=X.dtype)
    np.maximum.at(out, seg, X)
    # argmax row per (segment, channel): first row whose value equals the max
    hit = X == out[seg]
    rows = np.arange(X.shape[0])
    first = np.full((num_segments, X.shape[1]), X.shape[0], dtype=np.int64)
    np.minimum.at(first, seg, np.where(hit, rows[:, None], X.shape[0]))
    cols = np.broadcast_to(np.arange(X.shape[1]), first.shape)

    def vjp(g):
        gx = np.zeros_like(X)
        gx[first, cols] = g
        return (gx,)

    return _emit("segment_max", out, (x,), vjp, X.size)


# ---------------------------------------------------------------------------
# Parameter trees


def tree_tensors(obj: Any) -> list[Tensor]:
    """All tensors in a nest of dataclasses, lists, tuples and dicts, in order."""
    out: list[Tensor] = []
    _walk(obj, out.append)
    return out


def tree_replace(obj: Any, tensors: Sequence[Tensor]) -> Any:
    """Rebuild ``obj`` with its tensors swapped for ``tensors`` (same order)."""
    it = iter(tensors)
    rebuilt = _rebuild(obj, it)
    if next(it, None) is not None:
        raise ContractError("tree_replace: too many tensors")
    return rebuilt


def _walk(obj: Any, visit: Callable[[Tensor], None]) -> None:
    if isinstance(obj, Tensor):
        visit(obj)
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            _walk(getattr(obj, f.name), visit)
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            _walk(item, visit)
    elif isinstance(obj, dict):
        for key in obj:
            _walk(obj[key], visit)


def _rebuild(obj: Any, it: Iterator[Tensor]) -> Any:
    if isinstance(obj, Tensor):
        try:
            new = next(it)
        except StopIteration:
            raise ContractError("tree_replace: too few tensors") from None
        if new.shape != obj.shape:
            raise ShapeError(f"tree_replace: {new.shape} replaces {obj.shape}")
        return new
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        changes = {f.name: _rebuild(getattr(obj, f.name), it) for f in dataclasses.fields(obj) if f.init}
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, list):
        return [_rebuild(item, it) for item in obj]
    if isinstance(obj, tuple):
        return tuple(_rebuild(item, it) for item in obj)
    if isinstance(obj, dict):
        return {key: _rebuild(obj[key], it) for key in obj}
    return obj


def with_grad(obj: Any) -> Any:
    """Copy of a parameter tree whose tensors all require gradients."""
    return tree_replace(obj, [Tensor._wrap(t.data, True) for t in tree_tensors(obj)])


# ---------------------------------------------------------------------------
# Gradient checking


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Any],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    reference_fn: Callable[..., Tensor] | None = None,
) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |numeric|)``.

    ``fn`` is called with the tensors in ``inputs`` and must return a
    single-element tensor. Central differences are taken in each input's own
    dtype. ``max_coords`` caps the number of coordinates probed per input
    (chosen at random with ``seed``); by default every coordinate is probed.

    With ``reference_fn`` the numeric side is taken from that function on
    float64 copies of the inputs instead. This is how single-precision
    gradients are checked: the float32 backward pass is compared against a
    double-precision difference quotient, since float32 differences alone
    lose most of their digits to cancellation.
    """
    leaves = [Tensor._wrap(as_tensor(t).data, True) for t in inputs]
    with Tape() as tape:
        out = fn(*leaves)
    grads = tape.backward(out)
    num_fn, num_leaves = fn, leaves
    if reference_fn is not None:
        num_fn = reference_fn
        num_leaves = [Tensor._wrap(t.data.astype(np.float64), False) for t in leaves]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for pos, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros_like(leaf.data)).reshape(-1)
        base = num_leaves[pos].data.reshape(-1)
        coords = np.arange(base.size)
        if max_coords is not None and base.size > max_coords:
            coords = np.sort(rng.choice(base.size, size=max_coords, replace=False))
        for i in coords:
            hi, lo = base.copy(), base.copy()
            hi[i] = base[i] + base.dtype.type(eps)
            lo[i] = base[i] - base.dtype.type(eps)
            step = float(hi[i]) - float(lo[i])
            f_hi = _eval_with(num_fn, num_leaves, pos, hi.reshape(leaf.shape))
            f_lo = _eval_with(num_fn, num_leaves, pos, lo.reshape(leaf.shape))
            numeric = (f_hi - f_lo) / step
            err = abs(float(analytic[i]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def _eval_with(fn, leaves: list[Tensor], pos: int, data: np.ndarray) -> float:
    args = [Tensor._wrap(t.data, False) for t in leaves]
    args[pos] = Tensor._wrap(data, False)
    return as_tensor(fn(*args)).item()
