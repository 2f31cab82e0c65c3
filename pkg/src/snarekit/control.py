"""Unicycle obstacle-avoidance benchmark: dynamics, barrier constraints,
rollouts, and policy training.

The state is (px, py, theta, v, w); controls are linear and angular
acceleration. Each elliptical obstacle carries a higher-order barrier
h = d(h_e)/dt + kappa h_e built from the shifted-ellipse clearance h_e, and
safety is enforced per step by one lower-bounded constraint, linear in the
control. Constraints scale with the obstacle count, which is what rules out
closed-form full-row-rank repairs beyond two obstacles on this two-control
system.

Rollouts integrate with explicit Euler and stay on the autodiff tape, so the
quadratic trajectory cost trains the correction network end to end. The
constraint geometry at each step is built from state values (treated as
locally constant by the tape); the cost gradient still flows through states
and repaired controls.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._serde import read_json, substream, write_json
from .autodiff import Tensor
from .constraints import Bounds, ConstraintSet, LinearMap
from .errors import ContractError, RolloutError
from .models import SnarePolicy, forward, init_weights
from .repair import RepairConfig, snare_repair
from .training import Adam, RelaxationSchedule

STATE_DIM = 5
CONTROL_DIM = 2

# paper sampling boxes for initial states
INIT_PX = (-12.0, 2.0)
INIT_PY = (-2.0, 10.0)
INIT_THETA = (-np.pi / 4, -np.pi / 8)

G_MATRIX = np.array([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


@dataclass
class UnicycleState:
    px: float
    py: float
    theta: float
    v: float
    w: float

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.theta, self.v, self.w])

    @classmethod
    def from_array(cls, arr) -> "UnicycleState":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(*arr.tolist())


@dataclass
class EllipticalObstacle:
    cx: float
    cy: float
    rx: float
    ry: float
    lookahead: float = 1.0
    kappa: float = 1.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.rx <= 0 or self.ry <= 0:
            raise ContractError("obstacle axes must be positive")
        if self.kappa <= 0 or self.alpha <= 0:
            raise ContractError("barrier gains must be positive")


@dataclass
class RolloutConfig:
    dt: float = 0.05
    n_t: int = 10
    q_diag: np.ndarray = field(default_factory=lambda: np.array([100.0, 100.0, 0.0, 0.1, 0.1]))
    control_weight: float = 0.1

    def __post_init__(self):
        if self.dt <= 0:
            raise ContractError("dt must be positive")
        self.q_diag = np.asarray(self.q_diag, dtype=np.float64)


def drift(x: np.ndarray) -> np.ndarray:
    """F(x): state derivative under zero control."""
    px, py, theta, v, w = x
    return np.array([v * np.cos(theta), v * np.sin(theta), w, 0.0, 0.0])


def dynamics(x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """xdot = F(x) + G u; controls enter the last two components exactly."""
    out = drift(np.asarray(x, dtype=np.float64))
    out[3] += u[0]
    out[4] += u[1]
    return out


def dynamics_tape(x: Tensor, u: Tensor) -> Tensor:
    theta, v, w = x[2], x[3], x[4]
    parts = [
        ad.reshape(ad.mul(v, ad.cos(theta)), (1,)),
        ad.reshape(ad.mul(v, ad.sin(theta)), (1,)),
        ad.reshape(w, (1,)),
        ad.reshape(u[0], (1,)),
        ad.reshape(u[1], (1,)),
    ]
    return ad.concat(parts)


def _ellipse_terms(x: np.ndarray, obs: EllipticalObstacle):
    px, py, theta = x[0], x[1], x[2]
    a = (obs.cx - px + obs.lookahead * np.cos(theta)) / obs.rx
    b = (obs.cy - py + obs.lookahead * np.sin(theta)) / obs.ry
    return a, b


def clearance(x: np.ndarray, obs: EllipticalObstacle) -> float:
    """h_e: shifted-ellipse clearance, positive outside the obstacle."""
    a, b = _ellipse_terms(np.asarray(x, dtype=np.float64), obs)
    return float(a * a + b * b - 1.0)


def _clearance_spatial_grad(x: np.ndarray, obs: EllipticalObstacle) -> tuple[float, float, float]:
    theta = x[2]
    a, b = _ellipse_terms(x, obs)
    da_dth = -obs.lookahead * np.sin(theta) / obs.rx
    db_dth = obs.lookahead * np.cos(theta) / obs.ry
    hx = -2.0 * a / obs.rx
    hy = -2.0 * b / obs.ry
    hth = 2.0 * a * da_dth + 2.0 * b * db_dth
    return hx, hy, hth


def clearance_rate(x: np.ndarray, obs: EllipticalObstacle) -> float:
    """d(h_e)/dt along the drift; controls do not enter (h_e is positional)."""
    x = np.asarray(x, dtype=np.float64)
    hx, hy, hth = _clearance_spatial_grad(x, obs)
    theta, v, w = x[2], x[3], x[4]
    return float(hx * v * np.cos(theta) + hy * v * np.sin(theta) + hth * w)


def cbf_value(x: np.ndarray, obs: EllipticalObstacle) -> float:
    """Higher-order barrier h = d(h_e)/dt + kappa h_e."""
    return clearance_rate(x, obs) + obs.kappa * clearance(x, obs)


def cbf_gradient(x: np.ndarray, obs: EllipticalObstacle) -> np.ndarray:
    """Analytic gradient of the barrier in all five state coordinates."""
    x = np.asarray(x, dtype=np.float64)
    theta, v, w = x[2], x[3], x[4]
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    a, b = _ellipse_terms(x, obs)
    da_dth = -obs.lookahead * sin_t / obs.rx
    db_dth = obs.lookahead * cos_t / obs.ry
    hx, hy, hth = _clearance_spatial_grad(x, obs)

    hxx = 2.0 / obs.rx**2
    hyy = 2.0 / obs.ry**2
    hxth = 2.0 * obs.lookahead * sin_t / obs.rx**2
    hyth = -2.0 * obs.lookahead * cos_t / obs.ry**2
    d2a_dth = -obs.lookahead * cos_t / obs.rx
    d2b_dth = -obs.lookahead * sin_t / obs.ry
    hthth = 2.0 * (da_dth**2 + a * d2a_dth + db_dth**2 + b * d2b_dth)

    rate_px = hxx * v * cos_t + hxth * w
    rate_py = hyy * v * sin_t + hyth * w
    rate_th = hxth * v * cos_t + hyth * v * sin_t + hthth * w + v * (-hx * sin_t + hy * cos_t)
    rate_v = hx * cos_t + hy * sin_t
    rate_w = hth

    grad = np.array([rate_px, rate_py, rate_th, rate_v, rate_w])
    grad[0] += obs.kappa * hx
    grad[1] += obs.kappa * hy
    grad[2] += obs.kappa * hth
    return grad


def cbf_value_tape(x: Tensor, obs: EllipticalObstacle) -> Tensor:
    """Barrier value on the tape (used to cross-check the analytic gradient)."""
    px, py, theta, v, w = x[0], x[1], x[2], x[3], x[4]
    cos_t, sin_t = ad.cos(theta), ad.sin(theta)
    a = ad.mul(ad.tensor(1.0 / obs.rx), ad.add(ad.sub(ad.tensor(obs.cx), px), ad.mul(ad.tensor(obs.lookahead), cos_t)))
    b = ad.mul(ad.tensor(1.0 / obs.ry), ad.add(ad.sub(ad.tensor(obs.cy), py), ad.mul(ad.tensor(obs.lookahead), sin_t)))
    h_e = ad.sub(ad.add(ad.mul(a, a), ad.mul(b, b)), ad.tensor(1.0))
    hx = ad.mul(ad.tensor(-2.0 / obs.rx), a)
    hy = ad.mul(ad.tensor(-2.0 / obs.ry), b)
    da_dth = ad.mul(ad.tensor(-obs.lookahead / obs.rx), sin_t)
    db_dth = ad.mul(ad.tensor(obs.lookahead / obs.ry), cos_t)
    hth = ad.add(ad.mul(ad.mul(ad.tensor(2.0), a), da_dth), ad.mul(ad.mul(ad.tensor(2.0), b), db_dth))
    rate = ad.add(
        ad.add(ad.mul(hx, ad.mul(v, cos_t)), ad.mul(hy, ad.mul(v, sin_t))), ad.mul(hth, w)
    )
    return ad.add(rate, ad.mul(ad.tensor(obs.kappa), h_e))


def cbf_constraint_set(x: np.ndarray, obstacles: list[EllipticalObstacle]) -> ConstraintSet:
    """One lower-bounded constraint per obstacle, linear in the control.

    Row j is grad(h_j)' G u >= -alpha_j h_j - grad(h_j)' F(x). Rows are
    scaled to unit norm (the feasible set is unchanged); without this,
    distant obstacles contribute large-norm inactive rows that dominate the
    repair step and starve the active row.
    """
    x = np.asarray(x, dtype=np.float64)
    if not obstacles:
        return ConstraintSet([], Bounds(np.zeros(0), np.zeros(0)))
    rows = np.zeros((len(obstacles), CONTROL_DIM))
    lower = np.zeros(len(obstacles))
    f_x = drift(x)
    for j, obs in enumerate(obstacles):
        grad = cbf_gradient(x, obs)
        rows[j] = grad @ G_MATRIX
        lower[j] = -obs.alpha * cbf_value(x, obs) - grad @ f_x
        scale = max(float(np.linalg.norm(rows[j])), 1e-9)
        rows[j] /= scale
        lower[j] /= scale
    return ConstraintSet(
        [LinearMap(rows, kind="cbf")], Bounds(lower, np.full(len(obstacles), np.inf))
    )


@dataclass
class NominalGains:
    k_dist: float = 0.5
    k_v: float = 2.0
    k_head: float = 4.0
    k_w: float = 3.0


def make_nominal_controller(gains: NominalGains):
    """Proportional go-to-origin controller, obstacle-unaware, tape-evaluable.

    Drives forward speed toward k_dist * distance when facing the origin and
    steers by the sine of the heading error.
    """

    def controller(x: Tensor) -> Tensor:
        px, py, theta, v, w = x[0], x[1], x[2], x[3], x[4]
        cos_t, sin_t = ad.cos(theta), ad.sin(theta)
        d = ad.sqrt(ad.add(ad.add(ad.mul(px, px), ad.mul(py, py)), ad.tensor(1e-9)))
        inv_d = ad.reciprocal(d)
        e_cos = ad.mul(ad.neg(ad.add(ad.mul(px, cos_t), ad.mul(py, sin_t))), inv_d)
        e_sin = ad.mul(ad.sub(ad.mul(px, sin_t), ad.mul(py, cos_t)), inv_d)
        v_des = ad.mul(ad.tensor(gains.k_dist), ad.mul(d, e_cos))
        accel = ad.mul(ad.tensor(gains.k_v), ad.sub(v_des, v))
        steer = ad.sub(ad.mul(ad.tensor(gains.k_head), e_sin), ad.mul(ad.tensor(gains.k_w), w))
        return ad.concat([ad.reshape(accel, (1,)), ad.reshape(steer, (1,))])

    return controller


@dataclass
class Scenario:
    obstacles: list[EllipticalObstacle]
    gains: NominalGains = field(default_factory=NominalGains)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    eval_steps: int = 75
    repair_lam: float = 0.05
    repair_tol: float = 1e-6
    repair_max_iters: int = 50
    init_px: tuple[float, float] = INIT_PX
    init_py: tuple[float, float] = INIT_PY
    init_theta: tuple[float, float] = INIT_THETA
    notes: str = ""

    def repair_config(self, eps=0.0) -> RepairConfig:
        return RepairConfig(
            lam=self.repair_lam, tol=self.repair_tol, max_iters=self.repair_max_iters, eps=eps
        )

    def save(self, path: str) -> None:
        blob = {
            "format": "snarekit-scenario-v1",
            "obstacles": [vars(o) for o in self.obstacles],
            "gains": vars(self.gains),
            "dt": self.rollout.dt,
            "train_steps": self.rollout.n_t,
            "eval_steps": self.eval_steps,
            "cost": {
                "q_diag": self.rollout.q_diag.tolist(),
                "control_weight": self.rollout.control_weight,
            },
            "repair": {
                "lam": self.repair_lam,
                "tol": self.repair_tol,
                "max_iters": self.repair_max_iters,
            },
            "init_box": {
                "px": list(self.init_px),
                "py": list(self.init_py),
                "theta": list(self.init_theta),
            },
            "notes": self.notes,
        }
        write_json(path, blob)

    @classmethod
    def load(cls, path: str) -> "Scenario":
        blob = read_json(path)
        if blob.get("format") != "snarekit-scenario-v1":
            raise ContractError(f"not a scenario file: {path}")
        return cls(
            obstacles=[EllipticalObstacle(**o) for o in blob["obstacles"]],
            gains=NominalGains(**blob["gains"]),
            rollout=RolloutConfig(
                dt=blob["dt"],
                n_t=blob["train_steps"],
                q_diag=np.array(blob["cost"]["q_diag"]),
                control_weight=blob["cost"]["control_weight"],
            ),
            eval_steps=blob["eval_steps"],
            repair_lam=blob["repair"]["lam"],
            repair_tol=blob["repair"]["tol"],
            repair_max_iters=blob["repair"]["max_iters"],
            init_px=tuple(blob["init_box"]["px"]),
            init_py=tuple(blob["init_box"]["py"]),
            init_theta=tuple(blob["init_box"]["theta"]),
            notes=blob.get("notes", ""),
        )


def make_policy(
    scenario: Scenario,
    hidden=(64, 64),
    seed: int = 0,
    zero_head: bool = True,
    correction_scale: float = 2.0,
) -> SnarePolicy:
    """Nominal controller plus a tanh-bounded learned correction.

    The zeroed head makes the initial policy exactly nominal; the tanh bound
    keeps learned accelerations within +-correction_scale so the closed loop
    cannot run away during training.
    """
    correction = init_weights([STATE_DIM, *hidden, CONTROL_DIM], seed=seed)
    if zero_head:
        correction.zero_final_layer()
    return SnarePolicy(
        nominal=make_nominal_controller(scenario.gains),
        correction=correction,
        constraint_builder=lambda x: cbf_constraint_set(x, scenario.obstacles),
        repair_cfg=scenario.repair_config(),
        metadata={"hidden": list(hidden), "seed": seed, "correction_scale": correction_scale},
    )


def correction_output(policy: SnarePolicy, x: Tensor) -> Tensor:
    scale = policy.metadata.get("correction_scale", 2.0)
    return ad.mul(ad.tensor(scale), ad.tanh(forward(policy.correction, x)))


@dataclass
class RolloutResult:
    states: np.ndarray  # (steps+1, 5)
    controls: np.ndarray  # (steps+1, 2)
    clearances: np.ndarray  # (steps+1, n_obstacles)
    cost: float
    cost_node: Tensor | None
    repair_iterations: int
    constraint_violation: float  # max over steps of repaired-control violation


def rollout(
    policy: SnarePolicy,
    x0: np.ndarray,
    cfg: RolloutConfig,
    obstacles: list[EllipticalObstacle] | None = None,
    steps: int | None = None,
    eps: float = 0.0,
    use_correction: bool = True,
    repaired: bool = True,
    keep_tape: bool = False,
) -> RolloutResult:
    """Explicit-Euler rollout under the (optionally repaired) policy.

    cost = dt * sum_i x_i' Q x_i + c ||u_i||^2 over steps 0..n_t inclusive.
    With `keep_tape` the cost node stays differentiable w.r.t. the correction
    parameters; otherwise only values are returned.
    """
    n_t = cfg.n_t if steps is None else steps
    if obstacles is None:
        obstacles = []
    x = ad.tensor(np.asarray(x0, dtype=np.float64))
    q_diag = ad.tensor(cfg.q_diag)
    states = [x.data.copy()]
    controls = []
    clearances = []
    cost_terms = []
    repair_iters = 0
    worst_violation = 0.0
    rc_base = policy.repair_cfg if policy.repair_cfg is not None else RepairConfig()

    for i in range(n_t + 1):
        u_hat = policy.nominal(x)
        if use_correction:
            u_hat = ad.add(u_hat, correction_output(policy, x))
        cs = policy.constraint_builder(x.data)
        if repaired:
            rc = RepairConfig(
                lam=rc_base.lam, tol=rc_base.tol, step_tol=rc_base.step_tol,
                max_iters=rc_base.max_iters, eps=eps,
            )
            u, trace = snare_repair(u_hat, cs, rc)
            repair_iters += trace.iterations
        else:
            u = u_hat
        worst_violation = max(worst_violation, cs.max_violation(u.data, eps if repaired else 0.0))
        controls.append(u.data.copy())
        clearances.append([clearance(x.data, obs) for obs in obstacles])
        cost_terms.append(
            ad.reshape(
                ad.add(
                    ad.dot(x, ad.mul(q_diag, x)),
                    ad.mul(ad.tensor(cfg.control_weight), ad.sumsq(u)),
                ),
                (1,),
            )
        )
        if i < n_t:
            x = ad.add(x, ad.mul(ad.tensor(cfg.dt), dynamics_tape(x, u)))
            if not np.all(np.isfinite(x.data)):
                raise RolloutError(f"nonfinite state at rollout step {i + 1}")
            states.append(x.data.copy())

    cost_node = ad.mul(ad.tensor(cfg.dt), ad.total(ad.concat(cost_terms)))
    return RolloutResult(
        states=np.array(states),
        controls=np.array(controls),
        clearances=np.array(clearances),
        cost=float(cost_node.data),
        cost_node=cost_node if keep_tape else None,
        repair_iterations=repair_iters,
        constraint_violation=worst_violation,
    )


def sample_initial_states(
    count: int, seed: int, scenario: Scenario | None = None, clearance_margin: float = 0.1
) -> np.ndarray:
    """Uniform positions/headings in the configured boxes, zero velocities.

    When the scenario has obstacles, samples born with barrier clearance
    below `clearance_margin` are rejected and redrawn (nothing starts inside
    an obstacle).
    """
    if count < 1:
        raise ContractError("count must be >= 1")
    box_px, box_py, box_th = (
        (scenario.init_px, scenario.init_py, scenario.init_theta)
        if scenario is not None
        else (INIT_PX, INIT_PY, INIT_THETA)
    )
    obstacles = scenario.obstacles if scenario is not None else []
    rng = substream(seed, "init-states")
    out = np.zeros((count, STATE_DIM))
    k = 0
    for _ in range(1000 * count):
        if k == count:
            break
        cand = np.zeros(STATE_DIM)
        cand[0] = rng.uniform(*box_px)
        cand[1] = rng.uniform(*box_py)
        cand[2] = rng.uniform(*box_th)
        if all(clearance(cand, obs) >= clearance_margin for obs in obstacles):
            out[k] = cand
            k += 1
    if k < count:
        raise ContractError("could not sample initial states clear of the obstacles")
    return out


def train_policy(
    scenario: Scenario,
    n_starts: int = 32,
    epochs: int = 120,
    decay_epochs: int = 60,
    lr: float = 1e-3,
    hidden=(64, 64),
    seed: int = 0,
    batch_size: int = 8,
) -> tuple[SnarePolicy, dict]:
    """Train the correction network on the rollout cost with relaxed repair.

    The per-start slack starts at the unrepaired initial policy's worst
    constraint violation along its own rollout and decays linearly to zero,
    mirroring the dataset trainer's schedule.
    """
    if not (0 < decay_epochs < epochs):
        raise ContractError("need 0 < decay_epochs < epochs")
    policy = make_policy(scenario, hidden=hidden, seed=seed)
    starts = sample_initial_states(n_starts, seed, scenario)

    eps0 = {}
    for k in range(n_starts):
        # slack = worst violation along the initial policy's unrepaired rollout
        res = rollout(policy, starts[k], scenario.rollout, scenario.obstacles, repaired=False)
        eps0[k] = res.constraint_violation
    schedule = RelaxationSchedule(eps0, decay_epochs)

    opt = Adam(lr=lr)
    rng = substream(seed, "shuffle")
    log = {"epochs": []}
    for epoch in range(1, epochs + 1):
        order = [int(i) for i in rng.permutation(n_starts)]
        epoch_cost = 0.0
        epoch_viol = 0.0
        for batch in (order[k : k + batch_size] for k in range(0, n_starts, batch_size)):
            terms = []
            for k in batch:
                res = rollout(
                    policy, starts[k], scenario.rollout, scenario.obstacles,
                    eps=schedule.value(epoch, k), keep_tape=True,
                )
                epoch_cost += res.cost
                epoch_viol = max(epoch_viol, res.constraint_violation)
                terms.append(ad.reshape(res.cost_node, (1,)))
            batch_loss = ad.mul(ad.tensor(1.0 / len(batch)), ad.total(ad.concat(terms)))
            grads = ad.backward(batch_loss)
            params = policy.correction.parameters()
            arrays = [p.data for p in params]
            gs = [grads.get(p, np.zeros_like(p.data)) for p in params]
            policy.correction.assign_parameters(opt.step(arrays, gs))
        log["epochs"].append(
            {
                "epoch": epoch,
                "mean_cost": epoch_cost / n_starts,
                "max_relaxed_violation": epoch_viol,
                "max_slack": schedule.max_at(epoch),
            }
        )
    return policy, log


def trajectory_csv(result: RolloutResult, dt: float) -> str:
    """CSV with time, state, control, and per-obstacle clearance columns."""
    n_obs = result.clearances.shape[1] if result.clearances.size else 0
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["t", "px", "py", "theta", "v", "w", "a", "alpha"]
        + [f"h_e_{j}" for j in range(n_obs)]
    )
    for i in range(result.states.shape[0]):
        row = [format(i * dt, ".17g")]
        row += [format(v, ".17g") for v in result.states[i]]
        row += [format(v, ".17g") for v in result.controls[i]]
        row += [format(v, ".17g") for v in (result.clearances[i] if n_obs else [])]
        writer.writerow(row)
    return buf.getvalue()
