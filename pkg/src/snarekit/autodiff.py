"""Dense float64 tensors with a reverse-mode autodiff tape.

Every operation returns a new `Tensor` holding the numeric result, references
to its parents and a local adjoint rule. `backward()` walks the graph once in
reverse topological order and accumulates adjoints, so a node feeding several
consumers receives every path's contribution. Values are immutable after
construction; independent graphs never share mutable state, so separate
examples may be differentiated concurrently.

Differentiation through iterative procedures (e.g. the repair layer) works by
unrolling: every executed iteration stays on the tape, including the
regularized linear solve, whose adjoint rule is implemented directly.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import scipy.linalg

from .errors import ContractError, ShapeError, SingularMatrixError

__all__ = [
    "Tensor",
    "tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "dot",
    "sin",
    "cos",
    "sqrt",
    "relu",
    "reciprocal",
    "tanh",
    "total",
    "sumsq",
    "concat",
    "reshape",
    "regularized_solve",
    "backward",
]


class Tensor:
    """A float64 array on the tape.

    `parents` and `op` identify the node's adjoint rule; leaves have no
    parents. `grad` is populated on leaves by `backward()`.
    """

    __slots__ = ("data", "parents", "op", "_backward", "grad")

    def __init__(
        self,
        data,
        parents: tuple["Tensor", ...] = (),
        op: str = "leaf",
        backward_rule: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        if not parents:
            arr = np.array(arr, dtype=np.float64)  # leaves own their buffer
        arr.setflags(write=False)
        self.data = arr
        self.parents = parents
        self.op = op
        self._backward = backward_rule
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

    # operator sugar; plain numbers/arrays become constant leaves
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(data) -> Tensor:
    """Create a leaf tensor (copying the input values)."""
    return Tensor(data)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce `grad` back to `shape` after the limited broadcasting we allow."""
    if grad.shape == shape:
        return grad
    if shape == () or int(np.prod(shape)) == 1:
        return np.asarray(grad.sum()).reshape(shape)
    # row-vector bias added to a matrix: sum over leading axes
    extra = grad.ndim - len(shape)
    g = grad.sum(axis=tuple(range(extra))) if extra > 0 else grad
    if g.shape != shape:
        raise ShapeError(f"cannot reduce gradient {grad.shape} to {shape}")
    return g


def _check_elementwise(a: Tensor, b: Tensor, name: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return
    # matrix + trailing vector (bias rows)
    if len(sa) == 2 and sb == (sa[1],) or len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"{name}: incompatible shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "add")
    out = a.data + b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(out, (a, b), "add", rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "sub")
    out = a.data - b.data

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(out, (a, b), "sub", rule)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, (a,), "neg", lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_elementwise(a, b, "mul")
    out = a.data * b.data

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(out, (a, b), "mul", rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0 or ad.ndim > 2 or bd.ndim > 2:
        raise ShapeError(f"matmul: operands must be 1-D or 2-D, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != (bd.shape[0] if bd.ndim >= 1 else None):
        raise ShapeError(f"matmul: inner dimensions disagree, {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def rule(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        # 1-D @ 1-D is an inner product
        return g * bd, g * ad

    return Tensor(out, (a, b), "matmul", rule)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 1 or b.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")
    out = np.asarray(a.data @ b.data)

    def rule(g):
        return g * b.data, g * a.data

    return Tensor(out, (a, b), "dot", rule)


def sin(a: Tensor) -> Tensor:
    return Tensor(np.sin(a.data), (a,), "sin", lambda g: (g * np.cos(a.data),))


def cos(a: Tensor) -> Tensor:
    return Tensor(np.cos(a.data), (a,), "cos", lambda g: (-g * np.sin(a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, (a,), "sqrt", lambda g: (g * (0.5 / out),))


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = a.data > 0.0
    return Tensor(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor(out, (a,), "reciprocal", lambda g: (-g * out * out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar."""
    out = np.asarray(a.data.sum())
    return Tensor(out, (a,), "total", lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sumsq(a: Tensor) -> Tensor:
    """Squared Euclidean norm of all entries, as a scalar."""
    out = np.asarray(np.sum(a.data * a.data))
    return Tensor(out, (a,), "sumsq", lambda g: (2.0 * g * a.data,))


def concat(parts: Iterable[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat: expected 1-D parts, got shape {p.shape}")
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts])

    def rule(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return Tensor(out, parts, "concat", rule)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)

    def rule(g):
        return (g.reshape(a.shape),)

    return Tensor(out, (a,), "reshape", rule)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def rule(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[idx] = g
        return (full,)

    return Tensor(out, (a,), "slice", rule)


def _solve_from_cholesky(cho) -> Callable[[np.ndarray], np.ndarray]:
    def solve(x: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(cho, x, check_finite=False)

    return solve


def _solve_from_qr(r_factor: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
    # M = RᵀR, so M⁻¹x = R⁻¹ R⁻ᵀ x
    def solve(x: np.ndarray) -> np.ndarray:
        y = scipy.linalg.solve_triangular(r_factor, x, trans="T", check_finite=False)
        return scipy.linalg.solve_triangular(r_factor, y, check_finite=False)

    return solve


def regularized_solve(j: Tensor, r: Tensor, lam: float) -> Tensor:
    """Minimizer of ||J s - r||^2 + lam ||s||^2, differentiable in J and r.

    For lam > 0 this is s = (JᵀJ + lam I)⁻¹ Jᵀ r, factored by Cholesky with a
    QR fallback on the stacked system [J; sqrt(lam) I]. At lam = 0 the
    minimum-norm least-squares solution is returned, which requires J to have
    full rank; a rank-deficient J raises `SingularMatrixError`. lam itself is
    held constant by the tape.
    """
    j = _wrap(j)
    r = _wrap(r)
    if j.data.ndim != 2 or r.data.ndim != 1:
        raise ShapeError(f"regularized_solve: need J (m,n) and r (m,), got {j.shape}, {r.shape}")
    m, n = j.data.shape
    if r.size != m:
        raise ShapeError(f"regularized_solve: residual length {r.size} != row count {m}")
    if lam < 0:
        raise ContractError(f"regularized_solve: lam must be nonnegative, got {lam}")
    jd, rd = j.data, r.data

    if lam == 0.0:
        rank = np.linalg.matrix_rank(jd)
        if rank < min(m, n):
            raise SingularMatrixError(
                f"regularized_solve with lam=0: J is rank deficient (rank {rank} < {min(m, n)}); "
                "use lam > 0"
            )
        # QR-based solves: accuracy degrades with cond(J), not cond(J)^2
        if m <= n:
            # full row rank: min-norm solution s = Q R^-T r where Jᵀ = QR
            q_fac, r_fac = np.linalg.qr(jd.T)
            solve_n = _solve_from_qr(r_fac)  # applies (J Jᵀ)⁻¹ = (RᵀR)⁻¹
            q = solve_n(rd)
            s = q_fac @ scipy.linalg.solve_triangular(r_fac, rd, trans="T", check_finite=False)

            def rule(g):
                t = solve_n(jd @ g)
                grad_j = np.outer(q, g - jd.T @ t) - np.outer(t, s)
                return grad_j, t

            return Tensor(s, (j, r), "regularized_solve", rule)
        # full column rank: unique least-squares solution s = R⁻¹ Qᵀ r
        q_fac, r_fac = np.linalg.qr(jd)
        s = scipy.linalg.solve_triangular(r_fac, q_fac.T @ rd, check_finite=False)
        solve_m = _solve_from_qr(r_fac)

        def rule(g):
            w = solve_m(g)
            grad_j = np.outer(rd - jd @ s, w) - np.outer(jd @ w, s)
            return grad_j, jd @ w

        return Tensor(s, (j, r), "regularized_solve", rule)
    else:
        gram = jd.T @ jd + lam * np.eye(n)
        try:
            solve_m = _solve_from_cholesky(scipy.linalg.cho_factor(gram, check_finite=False))
        except scipy.linalg.LinAlgError:
            stacked = np.vstack([jd, np.sqrt(lam) * np.eye(n)])
            r_factor = np.linalg.qr(stacked, mode="r")
            solve_m = _solve_from_qr(r_factor)

    s = solve_m(jd.T @ rd)

    def rule(g):
        w = solve_m(g)
        grad_j = np.outer(rd - jd @ s, w) - np.outer(jd @ w, s)
        return grad_j, jd @ w

    return Tensor(s, (j, r), "regularized_solve", rule)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate adjoints from a scalar root.

    Returns the gradient map over leaf tensors reachable from the root, and
    stores each leaf's gradient in its `.grad` (overwriting previous runs).
    """
    if root.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_map: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g
            leaf_map[node] = g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    return leaf_map
