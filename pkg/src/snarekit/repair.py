"""Differentiable repair layers mapping a raw prediction to a feasible point.

Three routes are provided:

* `snare_repair` — iterative Levenberg-Marquardt Newton layer. Each iteration
  projects the constraint image onto the (slack-relaxed) bound box and takes a
  damped Newton step toward that target. Every executed iteration stays on the
  autodiff tape, so the repaired output is differentiable in the prediction.
* `hardnet_repair` — closed-form pseudoinverse correction, exact for linear
  constraints with a full-row-rank matrix.
* `posthoc_project` — Euclidean projection onto the feasible set by an
  augmented-Lagrangian descent; inference-only, never on the tape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .constraints import Bounds, ConstraintSet, as_slack, correction_vector
from .errors import ContractError, RankDeficiencyError

TERMINATION_REASONS = ("tol-met", "step-small", "iter-cap")

# relative singular-value cutoff for the full-row-rank precondition
RANK_RTOL = 1e-10


@dataclass
class RepairConfig:
    """Knobs for the iterative repair layer."""

    lam: float = 0.01
    tol: float = 1e-6
    step_tol: float = 1e-12
    max_iters: int = 50
    eps: float | np.ndarray = 0.0

    def __post_init__(self):
        if self.tol <= 0:
            raise ContractError(f"repair config: tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ContractError(f"repair config: max_iters must be >= 1, got {self.max_iters}")
        if self.lam < 0:
            raise ContractError(f"repair config: lam must be nonnegative, got {self.lam}")


@dataclass
class RepairTrace:
    """Iterates and per-iterate max violation against the relaxed bounds."""

    iterates: list[np.ndarray] = field(default_factory=list)
    violations: list[float] = field(default_factory=list)
    reason: str = ""

    @property
    def iterations(self) -> int:
        """Number of corrective steps taken (0 when already feasible)."""
        return len(self.iterates) - 1

    @property
    def converged(self) -> bool:
        return self.reason == "tol-met"

    def to_json_dict(self) -> dict:
        return {
            "iterates": len(self.iterates),
            "violations": [float(v) for v in self.violations],
            "termination": self.reason,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())


def snare_repair(
    y_hat: Tensor | np.ndarray, cs: ConstraintSet, cfg: RepairConfig
) -> tuple[Tensor, RepairTrace]:
    """Repair a prediction toward the eps-relaxed feasible set.

    Returns the repaired point (on the tape when `y_hat` is a Tensor or once
    wrapped) and the iteration trace. On hitting the iteration cap the last
    iterate is returned with the `iter-cap` flag rather than raising, so a
    training step is never aborted.
    """
    y = y_hat if isinstance(y_hat, Tensor) else ad.tensor(y_hat)
    if cs.m == 0:
        trace = RepairTrace([y.data.copy()], [0.0], "tol-met")
        return y, trace
    eps = as_slack(cfg.eps, cs.m)
    trace = RepairTrace()

    for k in range(cfg.max_iters):
        gval = cs.g_tape(y)
        delta = cs.correction_tape(gval, eps)
        v = float(np.abs(delta.data).max())
        trace.iterates.append(y.data.copy())
        trace.violations.append(v)
        if v <= cfg.tol:
            trace.reason = "tol-met"
            return y, trace
        jac = cs.jacobian_tape(y)
        step = ad.regularized_solve(jac, delta, cfg.lam)
        y = ad.add(y, step)
        if float(np.abs(step.data).max()) <= cfg.step_tol:
            v_new = cs.max_violation(y.data, eps)
            trace.iterates.append(y.data.copy())
            trace.violations.append(v_new)
            trace.reason = "tol-met" if v_new <= cfg.tol else "step-small"
            return y, trace

    v_final = cs.max_violation(y.data, eps)
    trace.iterates.append(y.data.copy())
    trace.violations.append(v_final)
    trace.reason = "tol-met" if v_final <= cfg.tol else "iter-cap"
    return y, trace


def check_full_row_rank(a: np.ndarray) -> None:
    """Raise unless `a` has full row rank (singular-value test)."""
    m, n = a.shape
    if m > n:
        raise RankDeficiencyError(
            f"constraint matrix has {m} rows but only {n} columns; "
            "full row rank is impossible, use snare_repair"
        )
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0 or sv[-1] <= RANK_RTOL * sv[0]:
        raise RankDeficiencyError(
            "constraint matrix is rank deficient "
            f"(sigma_min/sigma_max = {0.0 if sv[0] == 0 else sv[-1] / sv[0]:.2e}); use snare_repair"
        )


def hardnet_repair(y_hat: np.ndarray, a: np.ndarray, bounds: Bounds) -> np.ndarray:
    """Closed-form repair for linear constraints lo <= A y <= up.

    Adds the pseudoinverse preimage of the box correction, which lands every
    violated row exactly on its bound and leaves satisfied rows untouched.
    Requires A to have full row rank.
    """
    a = np.asarray(a, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    check_full_row_rank(a)
    z = a @ y_hat
    return y_hat + np.linalg.pinv(a) @ correction_vector(z, bounds)


def correction_descent(
    y_hat: Tensor | np.ndarray, cs: ConstraintSet, steps: int, lr: float
) -> Tensor:
    """Fixed-count gradient descent on the squared violation, on the tape.

    Baseline correction in the spirit of penalty-trained iterative methods: a
    simplified stand-in, with no feasibility guarantee. The violation gradient
    is J_g' applied to the correction vector, so each step is
    y <- y + 2 lr J_g(y)' delta(g(y)).
    """
    y = y_hat if isinstance(y_hat, Tensor) else ad.tensor(y_hat)
    if cs.m == 0:
        return y
    for _ in range(steps):
        delta = cs.correction_tape(cs.g_tape(y))
        if float(np.abs(delta.data).max()) == 0.0:
            break
        jac = cs.jacobian_tape(y)
        y = ad.add(y, ad.mul(ad.tensor(2.0 * lr), ad.matmul(delta, jac)))
    return y


@dataclass
class ProjectionResult:
    y: np.ndarray
    distance: float
    max_violation: float
    converged: bool


def posthoc_project(
    y_hat: np.ndarray,
    cs: ConstraintSet,
    target_violation: float = 1e-6,
    outer_rounds: int = 20,
    inner_steps: int = 200,
) -> ProjectionResult:
    """Euclidean projection of `y_hat` onto the feasible set (post-processing).

    Augmented-Lagrangian outer loop (penalty growth x10) around backtracking
    gradient descent. Not differentiable and never on the tape. If the target
    violation is not reached, the best iterate found is returned with
    `converged=False`.
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if cs.max_violation(y_hat) == 0.0:
        return ProjectionResult(y_hat.copy(), 0.0, 0.0, True)

    lo, up = cs.bounds.lower, cs.bounds.upper
    eq = cs.equality_mask
    lo_act = np.isfinite(lo) & ~eq
    up_act = np.isfinite(up) & ~eq

    mu_eq = np.zeros(cs.m)
    mu_lo = np.zeros(cs.m)
    mu_up = np.zeros(cs.m)
    rho = 10.0

    def al_value_grad(y):
        g = cs.g(y)
        jac = cs.jacobian(y)
        diff = y - y_hat
        val = float(diff @ diff)
        gbar = 2.0 * diff
        dpen = np.zeros(cs.m)
        if eq.any():
            h = g[eq] - up[eq]
            val += float(mu_eq[eq] @ h + 0.5 * rho * h @ h)
            dpen[eq] += mu_eq[eq] + rho * h
        if up_act.any():
            c = g[up_act] - up[up_act]
            t = np.maximum(mu_up[up_act] + rho * c, 0.0)
            val += float((t @ t - mu_up[up_act] @ mu_up[up_act]) / (2.0 * rho))
            dpen[up_act] += t
        if lo_act.any():
            c = lo[lo_act] - g[lo_act]
            t = np.maximum(mu_lo[lo_act] + rho * c, 0.0)
            val += float((t @ t - mu_lo[lo_act] @ mu_lo[lo_act]) / (2.0 * rho))
            dpen[lo_act] -= t
        return val, gbar + jac.T @ dpen

    def descend(y):
        step = 1.0
        val, grad = al_value_grad(y)
        for _ in range(inner_steps):
            gnorm2 = float(grad @ grad)
            if gnorm2 < 1e-24:
                break
            accepted = False
            while step > 1e-16:
                cand = y - step * grad
                cand_val, cand_grad = al_value_grad(cand)
                if cand_val <= val - 1e-4 * step * gnorm2:
                    y, val, grad = cand, cand_val, cand_grad
                    step = min(step * 2.0, 1e6)
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                break
        return y

    y = y_hat.copy()
    best_y, best_viol = y.copy(), cs.max_violation(y)
    for _ in range(outer_rounds):
        y = descend(y)
        viol = cs.max_violation(y)
        if viol < best_viol:
            best_y, best_viol = y.copy(), viol
        if viol <= target_violation:
            break
        g = cs.g(y)
        mu_eq[eq] += rho * (g[eq] - up[eq])
        mu_up[up_act] = np.maximum(mu_up[up_act] + rho * (g[up_act] - up[up_act]), 0.0)
        mu_lo[lo_act] = np.maximum(mu_lo[lo_act] + rho * (lo[lo_act] - g[lo_act]), 0.0)
        rho *= 10.0

    out = y if cs.max_violation(y) <= target_violation else best_y
    viol = cs.max_violation(out)
    return ProjectionResult(out, float(np.linalg.norm(out - y_hat)), viol, viol <= target_violation)
