"""Dense tensors, CSR sparse matrices, a reverse-mode autodiff tape, and Adam.

The numerical substrate for the whole lab. Tensors are immutable value
types wrapping float64 numpy arrays; every differentiable primitive
records a backward rule on the active tape. numpy supplies the array
arithmetic; the differentiation machinery lives entirely here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import SeededRng


class TapeError(RuntimeError):
    """Autodiff misuse: no active tape, stale tape, or double backward."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


def _check_finite(arr: np.ndarray, ctx: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {ctx}")


class Tensor:
    """Immutable dense float64 tensor (row-major), optionally tracked for grad."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check:
            _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _check=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all real work happens in the module-level ops.
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class SparseMatrix:
    """Immutable CSR matrix. Column indices are strictly increasing within
    each row, which also rules out duplicate (row, col) entries."""

    __slots__ = ("n_rows", "n_cols", "row_offsets", "col_indices", "values",
                 "requires_grad", "_row_ids")

    def __init__(self, n_rows, n_cols, row_offsets, col_indices, values,
                 requires_grad: bool = False):
        self.n_rows = int(n_rows)
        self.n_cols = int(n_cols)
        self.row_offsets = np.asarray(row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(col_indices, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._row_ids = None
        self._validate()

    def _validate(self):
        ro, ci = self.row_offsets, self.col_indices
        if ro.shape != (self.n_rows + 1,):
            raise ValueError("row_offsets must have length n_rows+1")
        if ro[0] != 0 or ro[-1] != len(ci) or np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be nondecreasing from 0 to nnz")
        if len(ci) != len(self.values):
            raise ValueError("col_indices and values length mismatch")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ValueError("column index out of range")
        # strictly increasing columns within each row <=> canonical, no dups
        if len(ci) > 1:
            same_row = np.repeat(np.arange(self.n_rows), np.diff(ro))
            bad = (np.diff(ci) <= 0) & (same_row[1:] == same_row[:-1])
            if np.any(bad):
                raise ValueError("duplicate or unsorted (row, col) entries")

    @classmethod
    def from_coo(cls, rows, cols, values, shape, requires_grad: bool = False):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        n_rows, n_cols = shape
        order = np.lexsort((cols, rows))
        rows, cols, values = rows[order], cols[order], values[order]
        row_offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.add.at(row_offsets, rows + 1, 1)
        row_offsets = np.cumsum(row_offsets)
        return cls(n_rows, n_cols, row_offsets, cols, values, requires_grad)

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def row_ids(self) -> np.ndarray:
        """COO-style row index per stored entry (cached)."""
        if self._row_ids is None:
            self._row_ids = np.repeat(np.arange(self.n_rows, dtype=np.int64),
                                      np.diff(self.row_offsets))
        return self._row_ids

    def densify(self) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols))
        out[self.row_ids, self.col_indices] = self.values
        return out

    def with_values(self, values, requires_grad: bool = False) -> "SparseMatrix":
        """Same sparsity pattern, new values."""
        return SparseMatrix(self.n_rows, self.n_cols, self.row_offsets,
                            self.col_indices, values, requires_grad)


# ---------------------------------------------------------------------------
# Tape

_ACTIVE_TAPE: list = []


class Gradients:
    """Result of a backward pass: gradient lookup per input tensor."""

    def __init__(self, table: dict):
        self._table = table

    def of(self, t) -> np.ndarray:
        """Gradient of the loss w.r.t. t; zeros if t did not participate."""
        g = self._table.get(id(t))
        if g is not None:
            return g
        if isinstance(t, SparseMatrix):
            return np.zeros_like(t.values)
        return np.zeros_like(t.data)


class Tape:
    """Ordered record of differentiable primitives from one forward pass.

    Entries are appended in forward (topological) order; backward walks
    them in reverse. A tape supports exactly one backward call.
    """

    def __init__(self):
        self._entries = []          # (output tensor, backward fn)
        self._produced = set()      # ids of tensors created under this tape
        self._consumed = False

    def __enter__(self):
        if _ACTIVE_TAPE:
            raise TapeError("a tape is already active (tapes do not nest)")
        _ACTIVE_TAPE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.pop()
        return False

    def _record(self, out: Tensor, backward_fn) -> None:
        self._entries.append((out, backward_fn))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> Gradients:
        """Accumulate d(loss)/d(input) for every tensor recorded on this tape."""
        if self._consumed:
            raise TapeError("backward already called on this tape; run a new forward")
        if loss.data.shape != ():
            raise TapeError(f"backward root must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced under this tape (stale tape?)")
        self._consumed = True
        table: dict = {id(loss): np.array(1.0)}
        for out, fn in reversed(self._entries):
            g = table.get(id(out))
            if g is None:
                continue
            fn(g, table)
        return Gradients(table)


def tape() -> Tape:
    return Tape()


def _active_tape_for(*inputs):
    """Return the active tape if any input is grad-tracked, else None."""
    tracked = any(
        (isinstance(t, (Tensor, SparseMatrix)) and t.requires_grad) for t in inputs
    )
    if not tracked:
        return None
    if not _ACTIVE_TAPE:
        raise TapeError("grad-tracked operation outside an active tape")
    return _ACTIVE_TAPE[0]


def _accum(table: dict, t, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    k = id(t)
    prev = table.get(k)
    table[k] = g if prev is None else prev + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _emit(data: np.ndarray, ctx: str, inputs: tuple, backward_fn) -> Tensor:
    _check_finite(np.asarray(data), ctx)
    t = _active_tape_for(*inputs)
    out = Tensor(data, requires_grad=t is not None, _check=False)
    if t is not None:
        t._record(out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# Elementwise arithmetic (with numpy broadcasting)

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, table):
        _accum(table, a, _unbroadcast(g, a.data.shape))
        _accum(table, b, _unbroadcast(g, b.data.shape))

    return _emit(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, table):
        _accum(table, a, _unbroadcast(g, a.data.shape))
        _accum(table, b, _unbroadcast(-g, b.data.shape))

    return _emit(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, table):
        _accum(table, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(table, b, _unbroadcast(g * a.data, b.data.shape))

    return _emit(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g, table):
        _accum(table, a, _unbroadcast(g / b.data, a.data.shape))
        _accum(table, b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _emit(a.data / b.data, "div", (a, b), backward)


# ---------------------------------------------------------------------------
# Linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; also batched when inputs carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires at least 2-D operands")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimension mismatch: {a.shape} x {b.shape}")

    def backward(g, table):
        _accum(table, a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        _accum(table, b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _emit(a.data @ b.data, "matmul", (a, b), backward)


def spmm(s: SparseMatrix, d) -> Tensor:
    """Sparse (CSR) times dense: equals matmul(densify(s), d)."""
    d = as_tensor(d)
    if d.ndim != 2:
        raise ValueError("spmm dense operand must be 2-D")
    if s.n_cols != d.data.shape[0]:
        raise ValueError(
            f"spmm dimension mismatch: {s.n_rows}x{s.n_cols} x {d.shape}")
    rows, cols, vals = s.row_ids, s.col_indices, s.values
    out = np.zeros((s.n_rows, d.data.shape[1]))
    np.add.at(out, rows, vals[:, None] * d.data[cols])

    def backward(g, table):
        if d.requires_grad:
            gd = np.zeros_like(d.data)
            np.add.at(gd, cols, vals[:, None] * g[rows])
            _accum(table, d, gd)
        if s.requires_grad:
            gv = np.einsum("ij,ij->i", g[rows], d.data[cols])
            _accum(table, s, gv)

    return _emit(out, "spmm", (s, d), backward)


# ---------------------------------------------------------------------------
# Nonlinearities

_ACTIVATIONS = ("relu", "elu", "leaky_relu", "exp", "log", "tanh")


def apply_activation(x, kind: str, slope: float = 0.2) -> Tensor:
    """Elementwise nonlinearity. Kink subgradients: relu'(0)=0, leaky'(0)=slope."""
    x = as_tensor(x)
    xd = x.data
    if kind == "relu":
        out = np.maximum(xd, 0.0)
        local = (xd > 0).astype(np.float64)
    elif kind == "elu":
        out = np.where(xd > 0, xd, np.expm1(xd))
        local = np.where(xd > 0, 1.0, np.exp(np.minimum(xd, 0.0)))
    elif kind == "leaky_relu":
        out = np.where(xd > 0, xd, slope * xd)
        local = np.where(xd > 0, 1.0, slope)
    elif kind == "exp":
        out = np.exp(xd)
        local = out
    elif kind == "log":
        if np.any(xd <= 0):
            raise ValueError("log requires strictly positive inputs")
        out = np.log(xd)
        local = 1.0 / xd
    elif kind == "tanh":
        out = np.tanh(xd)
        local = 1.0 - out * out
    else:
        raise ValueError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")

    def backward(g, table):
        _accum(table, x, g * local)

    return _emit(out, f"activation:{kind}", (x,), backward)


def relu(x) -> Tensor:
    return apply_activation(x, "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    return apply_activation(x, "leaky_relu", slope)


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise ValueError("sqrt requires strictly positive inputs")
    out = np.sqrt(x.data)

    def backward(g, table):
        _accum(table, x, g * 0.5 / out)

    return _emit(out, "sqrt", (x,), backward)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    x = as_tensor(x)
    if x.ndim < 1 or x.data.shape[-1] < 1:
        raise ValueError("softmax requires at least one column")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g, table):
        inner = (g * out).sum(axis=-1, keepdims=True)
        _accum(table, x, out * (g - inner))

    return _emit(out, "softmax_rows", (x,), backward)


_PROB_CLAMP = 1e-12


def cross_entropy(posteriors, labels, mask=None) -> Tensor:
    """Mean over masked rows of -log(posterior[label]), clamped at 1e-12."""
    p = as_tensor(posteriors)
    if p.ndim != 2:
        raise ValueError("cross_entropy expects an m x C posterior matrix")
    m, c = p.data.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (m,):
        raise ValueError("labels length must match posterior rows")
    if len(labels) and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("label out of range")
    if mask is None:
        mask = np.ones(m, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    idx = np.nonzero(mask)[0]
    if len(idx) == 0:
        raise ValueError("cross_entropy mask selects no rows")
    picked = p.data[idx, labels[idx]]
    clamped = np.maximum(picked, _PROB_CLAMP)
    loss = float(np.mean(-np.log(clamped)))

    def backward(g, table):
        gp = np.zeros_like(p.data)
        live = picked > _PROB_CLAMP  # zero subgradient where clamped
        rows = idx[live]
        gp[rows, labels[rows]] = -g / (len(idx) * picked[live])
        _accum(table, p, gp)

    return _emit(np.array(loss), "cross_entropy", (p,), backward)


# ---------------------------------------------------------------------------
# Reductions and shape ops

def sum_all(x) -> Tensor:
    x = as_tensor(x)

    def backward(g, table):
        _accum(table, x, np.broadcast_to(g, x.data.shape).copy())

    return _emit(np.asarray(x.data.sum()), "sum_all", (x,), backward)


def sum_axis(x, axis: int, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g, table):
        gg = g if keepdims else np.expand_dims(g, axis)
        _accum(table, x, np.broadcast_to(gg, x.data.shape).copy())

    return _emit(x.data.sum(axis=axis, keepdims=keepdims), "sum_axis", (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)

    def backward(g, table):
        _accum(table, x, g.reshape(x.data.shape))

    return _emit(x.data.reshape(shape), "reshape", (x,), backward)


def permute(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = np.argsort(axes)

    def backward(g, table):
        _accum(table, x, g.transpose(inv))

    return _emit(x.data.transpose(axes), "permute", (x,), backward)


def gather_rows(x, idx) -> Tensor:
    """Select rows x[idx] along the first axis (indices may repeat)."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g, table):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        _accum(table, x, gx)

    return _emit(x.data[idx], "gather_rows", (x,), backward)


def segment_sum(x, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of x into num_segments buckets given per-row segment ids."""
    x = as_tensor(x)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (x.data.shape[0],):
        raise ValueError("segment_ids must have one id per row")
    out = np.zeros((num_segments,) + x.data.shape[1:])
    np.add.at(out, seg, x.data)

    def backward(g, table):
        _accum(table, x, g[seg])

    return _emit(out, "segment_sum", (x,), backward)


def dropout(x, p: float, rng: SeededRng) -> Tensor:
    """Seeded Bernoulli dropout with inverted scaling (training-time only)."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must be in [0, 1)")
    if p == 0.0:
        return x
    scale = (rng.keep_mask(x.data.shape, 1.0 - p)).astype(np.float64) / (1.0 - p)

    def backward(g, table):
        _accum(table, x, g * scale)

    return _emit(x.data * scale, "dropout", (x,), backward)


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """Adam optimizer state for a fixed list of parameter shapes."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps_stab: float = 1e-8
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps_stab: float = 1e-8) -> "AdamState":
        st = cls(lr=lr, beta1=beta1, beta2=beta2, eps_stab=eps_stab)
        st.m = [np.zeros_like(p.data) for p in params]
        st.v = [np.zeros_like(p.data) for p in params]
        return st


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Returns fresh parameter tensors;
    state is advanced in place."""
    if len(params) != len(state.m):
        raise ValueError("parameter count does not match optimizer state")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        new = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_stab)
        out.append(Tensor(new, requires_grad=p.requires_grad, _check=False))
    return out
