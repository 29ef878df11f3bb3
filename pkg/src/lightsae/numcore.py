"""Dense float64 matrices with tape-based reverse-mode differentiation.

Operations record themselves onto the innermost active :class:`Tape` when at
least one input has ``requires_grad`` set. Outside a tape nothing is recorded,
which is how evaluation runs.

A ``Matrix`` is normally 2-D. Operations also accept a leading batch axis
(``B x rows x cols``) so a whole mini-batch of windows goes through one tape
node instead of B of them.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError, ParseError

__all__ = [
    "Matrix",
    "Tape",
    "active_tape",
    "matmul",
    "add",
    "add_bias",
    "sub",
    "mul",
    "scale",
    "relu",
    "softmax_row",
    "softmax_rows",
    "einsum",
    "reshape",
    "square",
    "total",
    "mean",
    "backward",
    "svd_values",
    "to_csv",
    "from_csv",
    "to_json",
    "from_json",
]


class Matrix:
    """A float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def zeros(cls, *shape: int, requires_grad: bool = False) -> "Matrix":
        return cls(np.zeros(shape), requires_grad=requires_grad)

    @classmethod
    def eye(cls, n: int) -> "Matrix":
        return cls(np.eye(n))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[-2]

    @property
    def cols(self) -> int:
        return self.data.shape[-1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Matrix":
        return Matrix(self.data.copy())

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Matrix(shape={self.shape}{flag})"

    def __matmul__(self, other: "Matrix") -> "Matrix":
        return matmul(self, other)

    def __add__(self, other: "Matrix") -> "Matrix":
        return add(self, other)

    def __sub__(self, other: "Matrix") -> "Matrix":
        return sub(self, other)

    def __mul__(self, other) -> "Matrix":
        if isinstance(other, Matrix):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Matrix, inputs: tuple[Matrix, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes shadow outer ones.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


@contextmanager
def no_record() -> Iterator[None]:
    """Temporarily disable recording (evaluation inside a training tape)."""
    saved = Tape._stack[:]
    Tape._stack.clear()
    try:
        yield
    finally:
        Tape._stack.extend(saved)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(data: np.ndarray, op: str, inputs: tuple[Matrix, ...], grad_fns) -> Matrix:
    """Wrap an op result and record it when any input needs a gradient.

    ``grad_fns`` is a callable mapping the upstream gradient to a tuple of
    per-input gradients (``None`` for inputs that do not need one).
    """
    _check_finite(data, op)
    needs = any(m.requires_grad for m in inputs)
    out = Matrix.__new__(Matrix)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = False
    tape = active_tape()
    if needs and tape is not None:
        out.requires_grad = True
        tape.nodes.append(_Node(out, inputs, grad_fns))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grads(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), grads)


def _binary_shapes_ok(a: Matrix, b: Matrix, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}") from None


def add(a: Matrix, b: Matrix) -> Matrix:
    _binary_shapes_ok(a, b, "add")
    out = a.data + b.data

    def grads(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(out, "add", (a, b), grads)


def add_bias(a: Matrix, b: Matrix) -> Matrix:
    """Row-broadcast ``b`` (1 x cols) onto every row of ``a``."""
    if b.data.ndim != 2 or b.rows != 1 or b.cols != a.cols:
        raise DimensionError(f"add_bias needs a 1x{a.cols} bias, got {b.shape}")
    return add(a, b)


def sub(a: Matrix, b: Matrix) -> Matrix:
    _binary_shapes_ok(a, b, "sub")
    out = a.data - b.data

    def grads(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(out, "sub", (a, b), grads)


def mul(a: Matrix, b: Matrix) -> Matrix:
    """Elementwise product with broadcasting."""
    _binary_shapes_ok(a, b, "mul")
    out = a.data * b.data

    def grads(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(out, "mul", (a, b), grads)


def scale(a: Matrix, c: float) -> Matrix:
    return _result(a.data * c, "scale", (a,), lambda g: (g * c,))


def square(a: Matrix) -> Matrix:
    return _result(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def relu(a: Matrix) -> Matrix:
    mask = a.data > 0.0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def softmax_rows(a: Matrix) -> Matrix:
    """Softmax along the last axis, max-subtracted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def grads(g):
        # (diag(s) - s s^T) g, row by row
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, "softmax", (a,), grads)


def softmax_row(v: Matrix) -> Matrix:
    if v.data.ndim != 2 or v.rows != 1 or v.cols < 1:
        raise DimensionError(f"softmax_row expects a 1xK matrix, got {v.shape}")
    return softmax_rows(v)


def _einsum2(sa: str, sb: str, so: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two-operand einsum routed through one batched matmul (BLAS).

    Indices split into batch (a, b, out), contracted (a, b), and free
    (one operand plus out). Indices seen by a single operand only are summed
    up front.
    """
    lonely_a = [c for c in sa if c not in sb and c not in so]
    if lonely_a:
        a = a.sum(axis=tuple(sa.index(c) for c in lonely_a))
        sa = "".join(c for c in sa if c not in lonely_a)
    lonely_b = [c for c in sb if c not in sa and c not in so]
    if lonely_b:
        b = b.sum(axis=tuple(sb.index(c) for c in lonely_b))
        sb = "".join(c for c in sb if c not in lonely_b)
    batch = [c for c in so if c in sa and c in sb]
    contract = [c for c in sa if c in sb and c not in so]
    free_a = [c for c in sa if c not in sb]
    free_b = [c for c in sb if c not in sa]
    dims = {c: n for s, x in ((sa, a), (sb, b)) for c, n in zip(s, x.shape)}
    size = lambda idx: int(np.prod([dims[c] for c in idx])) if idx else 1  # noqa: E731
    nb = [dims[c] for c in batch]
    at = a.transpose([sa.index(c) for c in batch + free_a + contract]).reshape(
        nb + [size(free_a), size(contract)]
    )
    bt = b.transpose([sb.index(c) for c in batch + contract + free_b]).reshape(
        nb + [size(contract), size(free_b)]
    )
    res = np.matmul(at, bt).reshape([dims[c] for c in batch + free_a + free_b])
    order = batch + free_a + free_b
    return res.transpose([order.index(c) for c in so])


def _einsum(subscripts: str, *arrays: np.ndarray) -> np.ndarray:
    lhs, so = subscripts.split("->")
    subs = lhs.split(",")
    if len(arrays) == 2:
        return _einsum2(subs[0], subs[1], so, *arrays)
    return np.einsum(subscripts, *arrays, optimize=len(arrays) > 2)


def einsum(subscripts: str, *operands: Matrix) -> Matrix:
    """Differentiable ``numpy.einsum`` for explicit-output subscripts.

    Each operand's gradient is the einsum of the upstream gradient with the
    other operands. Ellipsis is not supported.
    """
    if "->" not in subscripts or "." in subscripts:
        raise ContractError(f"einsum needs explicit output and no ellipsis: {subscripts!r}")
    lhs, out_sub = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise ContractError(f"einsum {subscripts!r} got {len(operands)} operands")
    for s, m in zip(in_subs, operands):
        if len(s) != m.data.ndim:
            raise DimensionError(f"einsum operand {s!r} does not match shape {m.shape}")
        if len(set(s)) != len(s):
            raise ContractError(f"einsum repeated index within operand {s!r}")
    try:
        out = _einsum(lhs + "->" + out_sub, *(m.data for m in operands))
    except ValueError as exc:
        raise DimensionError(f"einsum {subscripts!r}: {exc}") from None

    def grads(g):
        result = []
        for j, (s, m) in enumerate(zip(in_subs, operands)):
            if not m.requires_grad:
                result.append(None)
                continue
            others = [k for k in range(len(operands)) if k != j]
            seen = set(out_sub).union(*(in_subs[k] for k in others))
            # indices summed out by this operand alone get a broadcast gradient
            kept = "".join(c for c in s if c in seen)
            spec = ",".join([out_sub] + [in_subs[k] for k in others]) + "->" + kept
            gj = _einsum(spec, g, *(operands[k].data for k in others))
            if kept != s:
                gj = np.expand_dims(gj, tuple(ax for ax, c in enumerate(s) if c not in seen))
                gj = np.broadcast_to(gj, m.shape).copy()
            result.append(gj)
        return tuple(result)

    return _result(np.asarray(out, dtype=np.float64), "einsum", operands, grads)


def reshape(a: Matrix, *shape: int) -> Matrix:
    src = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(src),))


def total(a: Matrix) -> Matrix:
    """Sum of all entries as a 1x1 matrix."""
    src = a.shape
    out = np.array([[a.data.sum()]])
    return _result(out, "sum", (a,), lambda g: (np.full(src, g[0, 0]),))


def mean(a: Matrix) -> Matrix:
    n = a.data.size
    src = a.shape
    out = np.array([[a.data.sum() / n]])
    return _result(out, "mean", (a,), lambda g: (np.full(src, g[0, 0] / n),))


def backward(loss: Matrix, tape: Tape) -> None:
    """Populate ``.grad`` on every requires-grad matrix that feeds ``loss``.

    Gradients accumulate into existing ``.grad`` buffers; call ``zero_grad``
    between steps.
    """
    if loss.data.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced through the tape")
    upstream: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = upstream.pop(id(node.out), None)
        if g is None:
            continue
        node.out.accumulate(g)
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in upstream:
                upstream[key] = upstream[key] + gi
            else:
                upstream[key] = gi
    # whatever remains belongs to leaves
    for node in tape.nodes:
        for inp in node.inputs:
            g = upstream.pop(id(inp), None)
            if g is not None:
                inp.accumulate(g)


def _jacobi_column_norms(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60) -> np.ndarray:
    """One-sided (Hestenes) Jacobi: orthogonalise columns of ``a`` in place.

    Each rotation is the Jacobi rotation that annihilates one off-diagonal
    entry of the Gram matrix ``a^T a``; applying it to the columns instead of
    the Gram matrix avoids squaring the condition number. Pairs are visited in
    round-robin tournament order so each round rotates n/2 disjoint pairs at
    once.
    """
    u = a.copy()
    n = u.shape[1]
    if n == 1:
        return np.sqrt((u * u).sum(axis=0))
    players = list(range(n)) + ([-1] if n % 2 else [])
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            up, uq = u[:, p], u[:, q]
            alpha = (up * up).sum(axis=0)
            beta = (uq * uq).sum(axis=0)
            gamma = (up * uq).sum(axis=0)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            up, uq = up[:, active], uq[:, active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.hypot(1.0, t)
            s = c * t
            u[:, p] = c * up - s * uq
            u[:, q] = s * up + c * uq
        if not rotated:
            break
    return np.sqrt((u * u).sum(axis=0))


def svd_values(a: Matrix) -> np.ndarray:
    """Singular values in descending order (``min(m, n)`` of them)."""
    x = np.asarray(a.data if isinstance(a, Matrix) else a, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ContractError(f"svd_values needs a non-empty 2-D matrix, got {x.shape}")
    if not np.isfinite(x).all():
        raise ContractError("svd_values: matrix has non-finite entries")
    if x.shape[1] > x.shape[0]:
        x = x.T
    # column count is now min(m, n); a denormal off-diagonal overflows zeta to inf,
    # which correctly yields a zero rotation
    with np.errstate(over="ignore"):
        sigma = _jacobi_column_norms(x)
    return np.sort(sigma)[::-1]


def to_csv(m: Matrix, path: str | Path) -> None:
    np.savetxt(path, np.atleast_2d(m.data), delimiter=",", fmt="%.17g")


def from_csv(path: str | Path) -> Matrix:
    try:
        arr = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return Matrix(arr)


def to_json(m: Matrix) -> dict:
    return {"rows": m.rows, "cols": m.cols, "data": m.data.reshape(-1).tolist()}


def from_json(obj: dict | str) -> Matrix:
    if isinstance(obj, str):
        obj = json.loads(obj)
    rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    if len(data) != rows * cols:
        raise ParseError(f"matrix envelope has {len(data)} values for {rows}x{cols}")
    return Matrix(np.asarray(data, dtype=np.float64).reshape(rows, cols))


def stack_json(arr: np.ndarray) -> dict:
    """JSON envelope for arrays of any rank (stacked per-channel weights)."""
    return {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}


def unstack_json(obj: dict) -> np.ndarray:
    shape = tuple(int(s) for s in obj["shape"])
    data = np.asarray(obj["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise ParseError(f"array envelope has {data.size} values for shape {shape}")
    return data.reshape(shape)


def finite_difference(f: Callable[[], float], m: Matrix, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``m``."""
    g = np.zeros_like(m.data)
    flat = m.data.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gf[k] = (fp - fm) / (2.0 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(|a|, |b|, tiny) over the whole array."""
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


