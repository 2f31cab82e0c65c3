"""Input-dependent constraint systems lo <= g(y) <= up.

A `ConstraintSet` stacks constraint blocks (linear maps, quadratic forms, or a
generic tape-evaluable map) over one decision vector, together with the bound
box and per-row kind tags. Built-in blocks carry analytic Jacobians that are
also expressible on the tape, so repair iterations differentiate exactly; the
generic fallback gets its Jacobian from reverse-mode passes and is treated as
locally constant on the tape.

Box projection, the correction vector, and violations are total functions;
infinite bounds are handled by explicit finite masks, never by arithmetic
that could produce inf - inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


def as_slack(eps, m: int) -> np.ndarray:
    """Broadcast a scalar or per-constraint slack to an m-vector, validating eps >= 0."""
    arr = np.asarray(eps, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(m, float(arr))
    if arr.shape != (m,):
        raise ShapeError(f"slack: expected scalar or length-{m} vector, got shape {arr.shape}")
    if np.any(arr < 0.0):
        raise ContractError("slack must be nonnegative")
    return arr


@dataclass(frozen=True)
class Bounds:
    """Lower/upper bound box; entries may be -inf/+inf, equality rows have lo == up."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        up = np.asarray(self.upper, dtype=np.float64)
        if lo.ndim != 1 or lo.shape != up.shape:
            raise ShapeError(f"bounds: expected matching vectors, got {lo.shape} and {up.shape}")
        if np.any(lo > up):
            raise ContractError("bounds: lower exceeds upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def m(self) -> int:
        return self.lower.shape[0]

    @property
    def equality_mask(self) -> np.ndarray:
        return np.isfinite(self.lower) & (self.lower == self.upper)

    def relaxed(self, eps) -> tuple[np.ndarray, np.ndarray]:
        """Bound box widened by eps on every finite side."""
        e = as_slack(eps, self.m)
        lo = np.where(np.isfinite(self.lower), self.lower - e, self.lower)
        up = np.where(np.isfinite(self.upper), self.upper + e, self.upper)
        return lo, up


def box_project(z: np.ndarray, bounds: Bounds, eps=0.0) -> np.ndarray:
    """Componentwise clamp of z into the eps-relaxed box. Idempotent; total."""
    lo, up = bounds.relaxed(eps)
    return np.clip(np.asarray(z, dtype=np.float64), lo, up)


def correction_vector(z: np.ndarray, bounds: Bounds, eps=0.0) -> np.ndarray:
    """Elementwise displacement taking z into the (relaxed) box.

    relu(lo - z) - relu(z - up), with infinite bounds masked to contribute 0,
    so box_project(z) == z + correction_vector(z) exactly.
    """
    z = np.asarray(z, dtype=np.float64)
    lo, up = bounds.relaxed(eps)
    lo_mask = np.isfinite(lo)
    up_mask = np.isfinite(up)
    below = np.where(lo_mask, np.maximum(np.where(lo_mask, lo, 0.0) - z, 0.0), 0.0)
    above = np.where(up_mask, np.maximum(z - np.where(up_mask, up, 0.0), 0.0), 0.0)
    return below - above


def violation(z: np.ndarray, bounds: Bounds, eps=0.0) -> np.ndarray:
    """Per-constraint nonnegative violation; zero iff the constraint holds."""
    return np.abs(correction_vector(z, bounds, eps))


class LinearMap:
    """Constraint rows a_i^T y."""

    kind = "linear"

    def __init__(self, a: np.ndarray, kind: str | None = None):
        self.a = np.asarray(a, dtype=np.float64)
        if self.a.ndim != 2:
            raise ShapeError(f"linear block: expected a matrix, got shape {self.a.shape}")
        if kind is not None:
            self.kind = kind
        self._a_tensor = ad.tensor(self.a)

    @property
    def m(self) -> int:
        return self.a.shape[0]

    @property
    def n(self) -> int:
        return self.a.shape[1]

    def value(self, y: np.ndarray) -> np.ndarray:
        return self.a @ y

    def jacobian(self, y: np.ndarray) -> np.ndarray:
        return self.a

    def value_tape(self, y: Tensor) -> Tensor:
        return ad.matmul(self._a_tensor, y)

    def jacobian_tape(self, y: Tensor) -> Tensor:
        return self._a_tensor


class QuadraticMap:
    """Constraint rows y^T H_i y + q_i^T y + c_i with H_i symmetric."""

    kind = "quadratic"

    def __init__(self, h: np.ndarray, q: np.ndarray, c: np.ndarray | None = None):
        self.h = np.asarray(h, dtype=np.float64)
        self.q = np.asarray(q, dtype=np.float64)
        if self.h.ndim != 3 or self.h.shape[1] != self.h.shape[2]:
            raise ShapeError(f"quadratic block: H must be (m,n,n), got {self.h.shape}")
        if self.q.shape != self.h.shape[:2]:
            raise ShapeError(f"quadratic block: q must be (m,n), got {self.q.shape}")
        self.c = np.zeros(self.h.shape[0]) if c is None else np.asarray(c, dtype=np.float64)
        self._h_flat = ad.tensor(self.h.reshape(self.m * self.n, self.n))
        self._q_tensor = ad.tensor(self.q)
        self._c_tensor = ad.tensor(self.c)

    @property
    def m(self) -> int:
        return self.h.shape[0]

    @property
    def n(self) -> int:
        return self.h.shape[1]

    def value(self, y: np.ndarray) -> np.ndarray:
        hy = self.h @ y  # (m, n)
        return hy @ y + self.q @ y + self.c

    def jacobian(self, y: np.ndarray) -> np.ndarray:
        return 2.0 * (self.h @ y) + self.q

    def _hy_rows(self, y: Tensor) -> Tensor:
        # all H_i y products in one flattened matmul: (m*n, n) @ (n,) -> (m, n)
        return ad.reshape(ad.matmul(self._h_flat, y), (self.m, self.n))

    def value_tape(self, y: Tensor) -> Tensor:
        row_quads = ad.matmul(self._hy_rows(y), y)
        return ad.add(ad.add(row_quads, ad.matmul(self._q_tensor, y)), self._c_tensor)

    def jacobian_tape(self, y: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.tensor(2.0), self._hy_rows(y)), self._q_tensor)


class FunctionMap:
    """Generic block from a tape-evaluable map; Jacobian via reverse passes.

    The Jacobian is exposed as a constant on the tape (no second-order
    derivatives), so repair gradients through this block are approximate.
    """

    kind = "generic"

    def __init__(self, fn: Callable[[Tensor], Tensor], m: int, n: int):
        self.fn = fn
        self._m = m
        self._n = n

    @property
    def m(self) -> int:
        return self._m

    @property
    def n(self) -> int:
        return self._n

    def value(self, y: np.ndarray) -> np.ndarray:
        return self.fn(ad.tensor(y)).data.copy()

    def jacobian(self, y: np.ndarray) -> np.ndarray:
        jac = np.zeros((self._m, self._n))
        for i in range(self._m):
            leaf = ad.tensor(y)
            out = self.fn(leaf)
            ad.backward(out[i])
            jac[i] = leaf.grad
        return jac

    def value_tape(self, y: Tensor) -> Tensor:
        return self.fn(y)

    def jacobian_tape(self, y: Tensor) -> Tensor:
        return ad.tensor(self.jacobian(y.data))


@dataclass
class ConstraintSet:
    """Stacked constraint blocks with one bound box over the full row set."""

    blocks: Sequence
    bounds: Bounds
    kinds: list[str] = field(default_factory=list)

    def __post_init__(self):
        m = sum(b.m for b in self.blocks)
        if m != self.bounds.m:
            raise ShapeError(f"constraint set: {m} rows vs {self.bounds.m} bounds")
        ns = {b.n for b in self.blocks}
        if len(ns) > 1:
            raise ShapeError(f"constraint set: blocks disagree on dimension: {sorted(ns)}")
        if not self.kinds:
            self.kinds = [k for b in self.blocks for k in [b.kind] * b.m]
        self._box_cache: dict[bytes, tuple] = {}

    @property
    def m(self) -> int:
        return self.bounds.m

    @property
    def n(self) -> int:
        return self.blocks[0].n if self.blocks else 0

    @property
    def equality_mask(self) -> np.ndarray:
        return self.bounds.equality_mask

    def g(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.concatenate([b.value(y) for b in self.blocks]) if self.blocks else np.zeros(0)

    def jacobian(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=np.float64)
        return np.vstack([b.jacobian(y) for b in self.blocks])

    def g_tape(self, y: Tensor) -> Tensor:
        return ad.concat([b.value_tape(y) for b in self.blocks])

    def jacobian_tape(self, y: Tensor) -> Tensor:
        if len(self.blocks) == 1:
            return self.blocks[0].jacobian_tape(y)
        parts = [ad.reshape(b.jacobian_tape(y), (b.m * b.n,)) for b in self.blocks]
        return ad.reshape(ad.concat(parts), (self.m, self.n))

    def violation(self, y: np.ndarray, eps=0.0) -> np.ndarray:
        return violation(self.g(y), self.bounds, eps)

    def max_violation(self, y: np.ndarray, eps=0.0) -> float:
        v = self.violation(y, eps)
        return float(v.max()) if v.size else 0.0

    def _box_tensors(self, eps) -> tuple:
        # constant tensors for the eps-relaxed box, memoized per slack value
        key = as_slack(eps, self.m).tobytes()
        cached = self._box_cache.get(key)
        if cached is None:
            lo, up = self.bounds.relaxed(eps)
            lo_mask = np.isfinite(lo).astype(np.float64)
            up_mask = np.isfinite(up).astype(np.float64)
            cached = (
                ad.tensor(lo_mask),
                ad.tensor(up_mask),
                ad.tensor(np.where(lo_mask > 0, lo, 0.0)),
                ad.tensor(np.where(up_mask > 0, up, 0.0)),
            )
            self._box_cache[key] = cached
        return cached

    def relu_terms_tape(self, gval: Tensor, eps=0.0) -> tuple[Tensor, Tensor]:
        """Tape-side (relu(lo - g), relu(g - up)) against the eps-relaxed box.

        Masks are constants, so rows with infinite bounds contribute exactly
        zero value and zero gradient.
        """
        lo_mask, up_mask, lo_safe, up_safe = self._box_tensors(eps)
        below = ad.mul(lo_mask, ad.relu(ad.sub(lo_safe, gval)))
        above = ad.mul(up_mask, ad.relu(ad.sub(gval, up_safe)))
        return below, above

    def correction_tape(self, gval: Tensor, eps=0.0) -> Tensor:
        """Tape-side correction vector toward the eps-relaxed box."""
        below, above = self.relu_terms_tape(gval, eps)
        return ad.sub(below, above)


def stack(sets: Sequence[ConstraintSet]) -> ConstraintSet:
    """Concatenate several constraint sets over the same decision vector."""
    blocks = [b for cs in sets for b in cs.blocks]
    lower = np.concatenate([cs.bounds.lower for cs in sets])
    upper = np.concatenate([cs.bounds.upper for cs in sets])
    kinds = [k for cs in sets for k in cs.kinds]
    return ConstraintSet(blocks, Bounds(lower, upper), kinds)
