"""Benchmark problem families, instance generation, serialization, and a
desk-scale optimality oracle.

Two parametric families are provided:

* NCP — nonconvex sinusoidal-quadratic objective with linear inequality and
  equality constraints.
* QCQP — convex quadratic objective with convex quadratic inequalities and
  linear equalities.

Family constants are fixed per dataset; instances differ only in the equality
right-hand side `x`, constructed from a strictly feasible witness so every
instance is certified feasible with a margin. The oracle runs SLSQP (NCP uses
multi-start) and then polishes the result with active-set Newton steps on the
KKT system, recording the final residual with the cached solution.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import autodiff as ad
from ._serde import decode_array, encode_array, read_json, substream, write_json
from .autodiff import Tensor
from .constraints import Bounds, ConstraintSet, LinearMap, QuadraticMap
from .errors import ContractError, GenerationError, ShapeError

FEASIBILITY_MARGIN = 1e-3
WITNESS_RETRY_BUDGET = 200


@dataclass
class NcpFamily:
    """min 0.5 y'Qy + p'sin(y)  s.t.  Ay <= b, Cy = x."""

    q: np.ndarray
    p: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    seed: int = 0

    name = "ncp"
    convex = False

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.c.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.a.shape[0]

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.q @ y + self.p @ np.sin(y))

    def objective_grad(self, y: np.ndarray) -> np.ndarray:
        return self.q @ y + self.p * np.cos(y)

    def objective_hess(self, y: np.ndarray) -> np.ndarray:
        return self.q - np.diag(self.p * np.sin(y))

    def objective_tape(self, y: Tensor) -> Tensor:
        quad = ad.dot(y, ad.matmul(ad.tensor(self.q), y))
        return ad.add(ad.mul(ad.tensor(0.5), quad), ad.dot(ad.tensor(self.p), ad.sin(y)))

    def inequality_values(self, y: np.ndarray) -> np.ndarray:
        return self.a @ y

    def inequality_rhs(self) -> np.ndarray:
        return self.b

    def inequality_jacobian(self, y: np.ndarray) -> np.ndarray:
        return self.a

    def inequality_hessians(self):
        return None  # linear rows

    def constants(self) -> dict:
        return {k: encode_array(getattr(self, k)) for k in ("q", "p", "a", "b", "c")}

    @classmethod
    def from_constants(cls, blob: dict, seed: int) -> "NcpFamily":
        return cls(*(decode_array(blob[k]) for k in ("q", "p", "a", "b", "c")), seed=seed)


@dataclass
class QcqpFamily:
    """min 0.5 y'Qy + p'y  s.t.  y'H_i y + g_i'y <= h_i, Cy = x."""

    q: np.ndarray
    p: np.ndarray
    h_quad: np.ndarray  # (n_ineq, n, n), each PSD
    g_lin: np.ndarray  # (n_ineq, n)
    h_rhs: np.ndarray  # (n_ineq,)
    c: np.ndarray
    seed: int = 0

    name = "qcqp"
    convex = True

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def n_eq(self) -> int:
        return self.c.shape[0]

    @property
    def n_ineq(self) -> int:
        return self.h_quad.shape[0]

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.q @ y + self.p @ y)

    def objective_grad(self, y: np.ndarray) -> np.ndarray:
        return self.q @ y + self.p

    def objective_hess(self, y: np.ndarray) -> np.ndarray:
        return self.q

    def objective_tape(self, y: Tensor) -> Tensor:
        quad = ad.dot(y, ad.matmul(ad.tensor(self.q), y))
        return ad.add(ad.mul(ad.tensor(0.5), quad), ad.dot(ad.tensor(self.p), y))

    def inequality_values(self, y: np.ndarray) -> np.ndarray:
        return np.einsum("i,kij,j->k", y, self.h_quad, y) + self.g_lin @ y

    def inequality_rhs(self) -> np.ndarray:
        return self.h_rhs

    def inequality_jacobian(self, y: np.ndarray) -> np.ndarray:
        return 2.0 * (self.h_quad @ y) + self.g_lin

    def inequality_hessians(self):
        return 2.0 * self.h_quad

    def constants(self) -> dict:
        return {k: encode_array(getattr(self, k)) for k in ("q", "p", "h_quad", "g_lin", "h_rhs", "c")}

    @classmethod
    def from_constants(cls, blob: dict, seed: int) -> "QcqpFamily":
        return cls(*(decode_array(blob[k]) for k in ("q", "p", "h_quad", "g_lin", "h_rhs", "c")), seed=seed)


@dataclass
class ProblemInstance:
    """One parametric instance: equality input x plus its feasibility witness."""

    family: NcpFamily | QcqpFamily
    index: int
    x: np.ndarray
    witness: np.ndarray
    y_star: np.ndarray | None = None
    f_star: float | None = None
    kkt_residual: float | None = None
    status: str = "unsolved"


def to_constraint_set(instance: ProblemInstance) -> ConstraintSet:
    """Stack inequalities then equalities as one bound-boxed constraint map."""
    fam = instance.family
    blocks, lows, ups, kinds = [], [], [], []
    if fam.n_ineq > 0:
        if isinstance(fam, NcpFamily):
            blocks.append(LinearMap(fam.a))
            kinds += ["linear"] * fam.n_ineq
        else:
            blocks.append(QuadraticMap(fam.h_quad, fam.g_lin))
            kinds += ["quadratic"] * fam.n_ineq
        lows.append(np.full(fam.n_ineq, -np.inf))
        ups.append(fam.inequality_rhs())
    if fam.n_eq > 0:
        blocks.append(LinearMap(fam.c))
        kinds += ["linear"] * fam.n_eq
        lows.append(instance.x)
        ups.append(instance.x)
    lo = np.concatenate(lows) if lows else np.zeros(0)
    up = np.concatenate(ups) if ups else np.zeros(0)
    return ConstraintSet(blocks, Bounds(lo, up), kinds)


def _orthonormal_rows(mat: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(mat.T)
    return q.T[: mat.shape[0]]


def make_family(name: str, n: int, n_eq: int, n_ineq: int, seed: int):
    """Construct family constants from the generation substream of `seed`."""
    if n_eq > n:
        raise ContractError(f"n_eq={n_eq} may not exceed n={n}")
    if min(n, n_ineq) < 0 or n < 1:
        raise ContractError(f"invalid dims n={n}, n_ineq={n_ineq}")
    rng = substream(seed, "family")
    m = rng.standard_normal((n, n))
    q = m.T @ m + np.eye(n)
    p = rng.standard_normal(n)
    c = _orthonormal_rows(rng.standard_normal((n_eq, n))) if n_eq else np.zeros((0, n))
    # inequality rows are normalized (unit row norm / unit trace) so the
    # feasible region keeps a usable interior even at large n_ineq
    if name == "ncp":
        a = rng.standard_normal((n_ineq, n))
        if n_ineq:
            a /= np.linalg.norm(a, axis=1, keepdims=True)
        b = np.ones(n_ineq)  # y = 0 is strictly feasible with unit slack
        return NcpFamily(q, p, a, b, c, seed=seed)
    if name == "qcqp":
        h_quad = np.empty((n_ineq, n, n))
        for i in range(n_ineq):
            mi = rng.standard_normal((n, n))
            h_quad[i] = mi.T @ mi
            h_quad[i] /= np.trace(h_quad[i])
        g_lin = rng.standard_normal((n_ineq, n))
        if n_ineq:
            g_lin /= np.linalg.norm(g_lin, axis=1, keepdims=True)
        h_rhs = np.ones(n_ineq)
        return QcqpFamily(q, p, h_quad, g_lin, h_rhs, c, seed=seed)
    raise ContractError(f"unknown family {name!r} (expected 'ncp' or 'qcqp')")


def _witness_scale(family) -> float:
    # keep random witnesses strictly inside the unit-slack inequality set
    return 0.3 if isinstance(family, NcpFamily) else 0.2


def _inequality_slack(family, y: np.ndarray) -> float:
    if family.n_ineq == 0:
        return np.inf
    return float(np.min(family.inequality_rhs() - family.inequality_values(y)))


@dataclass
class Dataset:
    """A family plus its instances, split assignment, and cached oracle data."""

    family: NcpFamily | QcqpFamily
    x: np.ndarray  # (count, n_eq)
    witness: np.ndarray  # (count, n)
    split: dict[str, list[int]]
    seed: int
    oracle_y: np.ndarray | None = None
    oracle_f: np.ndarray | None = None
    oracle_residual: np.ndarray | None = None
    oracle_status: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._cs_cache: dict[int, ConstraintSet] = {}
        self._shared_blocks: list | None = None

    @property
    def count(self) -> int:
        return self.x.shape[0]

    def indices(self, split: str | None = None) -> list[int]:
        if split is None:
            return list(range(self.count))
        if split not in self.split:
            raise ContractError(f"unknown split {split!r}; have {sorted(self.split)}")
        return list(self.split[split])

    def instance(self, i: int) -> ProblemInstance:
        inst = ProblemInstance(self.family, i, self.x[i].copy(), self.witness[i].copy())
        if self.oracle_y is not None and self.oracle_status[i] != "unsolved":
            inst.y_star = self.oracle_y[i].copy()
            inst.f_star = float(self.oracle_f[i])
            inst.kkt_residual = float(self.oracle_residual[i])
            inst.status = self.oracle_status[i]
        return inst

    def constraint_set(self, i: int) -> ConstraintSet:
        """Per-instance constraint set; blocks are shared across instances
        (only the equality bounds carry the instance's x)."""
        cs = self._cs_cache.get(i)
        if cs is None:
            if self._shared_blocks is None:
                template = to_constraint_set(self.instance(i))
                self._shared_blocks = list(template.blocks)
                self._cs_cache[i] = template
                return template
            fam = self.family
            lows, ups = [], []
            if fam.n_ineq:
                lows.append(np.full(fam.n_ineq, -np.inf))
                ups.append(fam.inequality_rhs())
            if fam.n_eq:
                lows.append(self.x[i])
                ups.append(self.x[i])
            lo = np.concatenate(lows) if lows else np.zeros(0)
            up = np.concatenate(ups) if ups else np.zeros(0)
            cs = ConstraintSet(self._shared_blocks, Bounds(lo, up))
            self._cs_cache[i] = cs
        return cs

    def save(self, path: str) -> None:
        blob = {
            "format": "snarekit-dataset-v1",
            "family": self.family.name,
            "dims": {"n": self.family.n, "n_eq": self.family.n_eq, "n_ineq": self.family.n_ineq},
            "seed": self.seed,
            "constants": self.family.constants(),
            "x": encode_array(self.x),
            "witness": encode_array(self.witness),
            "split": {k: list(map(int, v)) for k, v in self.split.items()},
            "oracle": None
            if self.oracle_y is None
            else {
                "y": encode_array(self.oracle_y),
                "f": encode_array(self.oracle_f),
                "residual": encode_array(self.oracle_residual),
                "status": list(self.oracle_status),
            },
        }
        write_json(path, blob)

    @classmethod
    def load(cls, path: str) -> "Dataset":
        blob = read_json(path)
        if blob.get("format") != "snarekit-dataset-v1":
            raise ContractError(f"not a dataset file: {path}")
        fam_cls = {"ncp": NcpFamily, "qcqp": QcqpFamily}[blob["family"]]
        family = fam_cls.from_constants(blob["constants"], blob["seed"])
        ds = cls(
            family=family,
            x=decode_array(blob["x"]),
            witness=decode_array(blob["witness"]),
            split={k: list(v) for k, v in blob["split"].items()},
            seed=blob["seed"],
        )
        if blob["oracle"] is not None:
            ds.oracle_y = decode_array(blob["oracle"]["y"])
            ds.oracle_f = decode_array(blob["oracle"]["f"])
            ds.oracle_residual = decode_array(blob["oracle"]["residual"])
            ds.oracle_status = list(blob["oracle"]["status"])
        return ds


def generate(family_name: str, n: int, n_eq: int, n_ineq: int, count: int, seed: int) -> Dataset:
    """Generate `count` certified-feasible instances, deterministic under `seed`.

    Each instance's x is C @ witness for a witness that satisfies the
    inequalities with margin >= 1e-3, so the feasible set is provably
    nonempty. Split indices are recorded 8:1:1 in order.
    """
    if count < 1:
        raise ContractError(f"count must be >= 1, got {count}")
    family = make_family(family_name, n, n_eq, n_ineq, seed)
    rng = substream(seed, "witness")
    scale = _witness_scale(family)
    witnesses = np.empty((count, n))
    for i in range(count):
        for attempt in range(WITNESS_RETRY_BUDGET):
            y0 = scale * rng.standard_normal(n)
            if _inequality_slack(family, y0) >= FEASIBILITY_MARGIN:
                witnesses[i] = y0
                break
        else:
            raise GenerationError(
                f"could not certify a feasible witness for instance {i} "
                f"after {WITNESS_RETRY_BUDGET} attempts"
            )
    x = witnesses @ family.c.T
    n_train = int(round(count * 0.8))
    n_valid = int(round(count * 0.1))
    split = {
        "train": list(range(n_train)),
        "valid": list(range(n_train, min(n_train + n_valid, count))),
        "test": list(range(min(n_train + n_valid, count), count)),
    }
    ds = Dataset(family=family, x=x, witness=witnesses, split=split, seed=seed)
    ds.oracle_status = ["unsolved"] * count
    return ds


# ---------------------------------------------------------------------------
# Oracle: SLSQP (+ multi-start for NCP) followed by active-set KKT polishing
# ---------------------------------------------------------------------------

QCQP_RESIDUAL_TARGET = 1e-8
NCP_RESIDUAL_TARGET = 1e-6
NCP_STARTS = 8


def _kkt_residual(family, x, y, nu, mu, active):
    grad = family.objective_grad(y)
    if family.n_eq:
        grad = grad + family.c.T @ nu
    slack = family.inequality_rhs() - family.inequality_values(y) if family.n_ineq else np.zeros(0)
    if family.n_ineq and active.any():
        grad = grad + family.inequality_jacobian(y)[active].T @ mu
    parts = [np.abs(grad).max(initial=0.0)]
    if family.n_eq:
        parts.append(np.abs(family.c @ y - x).max(initial=0.0))
    if family.n_ineq:
        parts.append(np.maximum(-slack, 0.0).max(initial=0.0))  # primal violation
        if active.any():
            parts.append(np.abs(mu * slack[active]).max(initial=0.0))
            parts.append(np.maximum(-mu, 0.0).max(initial=0.0))
    return float(max(parts))


def _polish_kkt(family, x, y, active, max_newton=12):
    """Newton-solve the active-set KKT system from a near-solution."""
    n, n_eq = family.n, family.n_eq
    idx_active = np.flatnonzero(active)
    n_act = idx_active.size
    hess_ineq = family.inequality_hessians()

    def multipliers(yv):
        jac_rows = []
        if n_eq:
            jac_rows.append(family.c)
        if n_act:
            jac_rows.append(family.inequality_jacobian(yv)[idx_active])
        if not jac_rows:
            return np.zeros(0), np.zeros(0)
        jt = np.vstack(jac_rows).T
        sol, *_ = np.linalg.lstsq(jt, -family.objective_grad(yv), rcond=None)
        return sol[:n_eq], sol[n_eq:]

    nu, mu = multipliers(y)
    best = (y.copy(), nu.copy(), mu.copy())
    best_res = _kkt_residual(family, x, y, nu, mu, active)
    for _ in range(max_newton):
        grad = family.objective_grad(y)
        hess = family.objective_hess(y).copy()
        rows = []
        if n_eq:
            grad = grad + family.c.T @ nu
            rows.append(family.c)
        if n_act:
            jac_act = family.inequality_jacobian(y)[idx_active]
            grad = grad + jac_act.T @ mu
            if hess_ineq is not None:
                hess = hess + np.tensordot(mu, hess_ineq[idx_active], axes=1)
            rows.append(jac_act)
        cons_jac = np.vstack(rows) if rows else np.zeros((0, n))
        cons_val = []
        if n_eq:
            cons_val.append(family.c @ y - x)
        if n_act:
            cons_val.append(family.inequality_values(y)[idx_active] - family.inequality_rhs()[idx_active])
        cons_val = np.concatenate(cons_val) if cons_val else np.zeros(0)

        k = cons_jac.shape[0]
        kkt = np.block([[hess, cons_jac.T], [cons_jac, np.zeros((k, k))]])
        rhs = -np.concatenate([grad, cons_val])
        step, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        y = y + step[:n]
        if n_eq:
            nu = nu + step[n : n + n_eq]
        if n_act:
            mu = mu + step[n + n_eq :]
        res = _kkt_residual(family, x, y, nu, mu, active)
        if res < best_res:
            best, best_res = (y.copy(), nu.copy(), mu.copy()), res
        if res < 1e-13:
            break
    return best[0], best[1], best[2], best_res


def _slsqp(family, x, y0, maxiter=300):
    cons = []
    if family.n_eq:
        cons.append(
            {"type": "eq", "fun": lambda y: family.c @ y - x, "jac": lambda y: family.c}
        )
    if family.n_ineq:
        cons.append(
            {
                "type": "ineq",
                "fun": lambda y: family.inequality_rhs() - family.inequality_values(y),
                "jac": lambda y: -family.inequality_jacobian(y),
            }
        )
    res = scipy.optimize.minimize(
        family.objective,
        y0,
        jac=family.objective_grad,
        constraints=cons,
        method="SLSQP",
        options={"maxiter": maxiter, "ftol": 1e-12},
    )
    return res.x


def _solve_one(family, x, witness, instance_seed):
    target = QCQP_RESIDUAL_TARGET if family.convex else NCP_RESIDUAL_TARGET
    starts = [witness]
    if not family.convex:
        rng = substream(instance_seed, "oracle-starts")
        scale = max(1.0, float(np.linalg.norm(witness)))
        nullspace = scipy.linalg.null_space(family.c) if family.n_eq else np.eye(family.n)
        for _ in range(NCP_STARTS - 1):
            starts.append(witness + nullspace @ (scale * rng.standard_normal(nullspace.shape[1])))

    best = None
    for y0 in starts:
        y = _slsqp(family, x, y0)
        if not np.all(np.isfinite(y)):
            continue
        # active set from primal slack, then polish; drop rows whose
        # multipliers come out negative, add rows the polish step violated
        slack = family.inequality_rhs() - family.inequality_values(y) if family.n_ineq else np.zeros(0)
        active = slack < 1e-5
        for _ in range(3):
            y_pol, _, mu, res = _polish_kkt(family, x, y.copy(), active)
            if mu.size and np.any(mu < -1e-9):
                active[np.flatnonzero(active)[mu < -1e-9]] = False
                continue
            if family.n_ineq:
                new_viol = family.inequality_values(y_pol) - family.inequality_rhs() > 1e-9
                if np.any(new_viol & ~active):
                    active = active | new_viol
                    continue
            break
        cand = (y_pol, family.objective(y_pol), res)
        if best is None:
            best = cand
        else:
            cand_ok, best_ok = cand[2] <= 1e-5, best[2] <= 1e-5
            if (cand_ok and not best_ok) or (cand_ok == best_ok and cand[1] < best[1]):
                best = cand

    y, f_val, res = best
    status = ("optimal" if family.convex else "local-optimal") if res <= target else "residual-target-unmet"
    return y, f_val, res, status


def _oracle_worker(args):
    fam_blob, fam_name, seed, x, witness, idx = args
    fam_cls = {"ncp": NcpFamily, "qcqp": QcqpFamily}[fam_name]
    family = fam_cls.from_constants(fam_blob, seed)
    return idx, _solve_one(family, x, witness, seed * 1_000_003 + idx)


def solve_oracle(ds: Dataset, indices=None, workers: int | None = None) -> None:
    """Solve and cache oracle solutions for `indices` (default: all instances)."""
    if indices is None:
        indices = range(ds.count)
    indices = [i for i in indices]
    if ds.oracle_y is None:
        ds.oracle_y = np.zeros((ds.count, ds.family.n))
        ds.oracle_f = np.zeros(ds.count)
        ds.oracle_residual = np.full(ds.count, np.inf)
        ds.oracle_status = ["unsolved"] * ds.count
    if workers is None:
        workers = int(os.environ.get("SNAREKIT_THREADS", "1"))

    if workers > 1:
        args = [
            (ds.family.constants(), ds.family.name, ds.seed, ds.x[i], ds.witness[i], i)
            for i in indices
        ]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for idx, (y, f, res, status) in pool.map(_oracle_worker, args):
                ds.oracle_y[idx] = y
                ds.oracle_f[idx] = f
                ds.oracle_residual[idx] = res
                ds.oracle_status[idx] = status
    else:
        for i in indices:
            y, f, res, status = _solve_one(ds.family, ds.x[i], ds.witness[i], ds.seed * 1_000_003 + i)
            ds.oracle_y[i] = y
            ds.oracle_f[i] = f
            ds.oracle_residual[i] = res
            ds.oracle_status[i] = status


def oracle_solve(instance: ProblemInstance) -> tuple[np.ndarray, float, float]:
    """Solve one instance; caches the solution on the instance and returns it."""
    y, f_val, res, status = _solve_one(
        instance.family, instance.x, instance.witness, instance.index
    )
    instance.y_star = y
    instance.f_star = f_val
    instance.kkt_residual = res
    instance.status = status
    return y, f_val, res


# ---------------------------------------------------------------------------
# Independent reference: dense grid search over the equality-reduced space
# ---------------------------------------------------------------------------


def grid_search_reference(instance: ProblemInstance, resolution: float = 1e-4) -> float:
    """Best feasible objective on a dense grid; independent check of the oracle.

    Parametrizes the equality subspace y = C^T x + N t (C has orthonormal
    rows) and scans t over a coercivity-derived box. Only practical for 1 or 2
    free dimensions.
    """
    fam = instance.family
    n, n_eq = fam.n, fam.n_eq
    d = n - n_eq
    if d not in (1, 2):
        raise ContractError(f"grid search supports 1 or 2 free dims, got {d}")
    if n_eq:
        y_p = fam.c.T @ instance.x
        nullspace = scipy.linalg.null_space(fam.c)
    else:
        y_p = np.zeros(n)
        nullspace = np.eye(n)

    # coercivity bound: the quadratic part dominates outside a computable ball
    q_t = nullspace.T @ fam.q @ nullspace
    lin_t = nullspace.T @ (fam.q @ y_p + (fam.p if fam.convex else np.zeros(n)))
    t_uc = np.linalg.solve(q_t, -lin_t)
    lam_min = float(np.linalg.eigvalsh(q_t).min())
    wiggle = float(np.abs(fam.p).sum()) + 1.0
    radius = float(np.linalg.norm(t_uc)) + np.sqrt(4.0 * wiggle / lam_min) + 1.0

    axes = [np.arange(-radius, radius + resolution, resolution) for _ in range(d)]
    if d == 1:
        t_grid = axes[0][:, None]
    else:
        t1, t2 = np.meshgrid(axes[0], axes[1], indexing="ij")
        t_grid = np.column_stack([t1.ravel(), t2.ravel()])
    ys = y_p[None, :] + t_grid @ nullspace.T

    feasible = np.ones(ys.shape[0], dtype=bool)
    if fam.n_ineq:
        if isinstance(fam, NcpFamily):
            vals = ys @ fam.a.T
            feasible &= np.all(vals <= fam.b[None, :], axis=1)
        else:
            for i in range(fam.n_ineq):
                quad = np.einsum("kj,ji,ki->k", ys, fam.h_quad[i], ys)
                feasible &= quad + ys @ fam.g_lin[i] <= fam.h_rhs[i]
    ys = ys[feasible]
    if ys.shape[0] == 0:
        raise GenerationError("grid search found no feasible point; widen the search box")
    quad = 0.5 * np.einsum("kj,ji,ki->k", ys, fam.q, ys)
    if fam.convex:
        objs = quad + ys @ fam.p
    else:
        objs = quad + np.sin(ys) @ fam.p
    return float(objs.min())
