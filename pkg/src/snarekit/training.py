"""End-to-end training with adaptive constraint relaxation, plus baselines.

Modes:

* ``snare`` — repair active at every step against a per-instance slack that
  starts at the untrained model's violation (so repair is a no-op at epoch 0)
  and decays linearly to exactly zero at the decay horizon.
* ``soft`` — penalty terms on squared constraint violations, no repair.
* ``soft-epochs-then-hard`` — soft loss for the first `soft_epochs`, then the
  repair layer with zero slack.
* ``penalty-grad`` — soft loss on a prediction post-processed by a fixed
  number of gradient-descent steps on the squared violation (a simplified
  stand-in for equality-completion baselines, not a reimplementation).

Training is self-supervised on the parametric objective; supervised
regression onto cached oracle solutions is available for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from ._serde import substream
from .autodiff import Tensor
from .constraints import ConstraintSet
from .errors import ContractError, TrainingDivergedError
from .evaluation import split_metrics
from .models import Mlp, forward, init_weights
from .problems import Dataset, ProblemInstance
from .repair import RepairConfig, correction_descent, snare_repair

MODES = ("snare", "soft", "soft-epochs-then-hard", "penalty-grad")


class Adam:
    """Standard Adam on flat parameter arrays; returns fresh arrays each step."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


class Sgd:
    def __init__(self, lr: float = 1e-3):
        self.lr = lr

    def step(self, params, grads):
        return [p - self.lr * g for p, g in zip(params, grads)]


def make_optimizer(name: str, lr: float):
    if name == "adam":
        return Adam(lr=lr)
    if name == "sgd":
        return Sgd(lr=lr)
    raise ContractError(f"unknown optimizer {name!r}")


@dataclass
class RelaxationSchedule:
    """Per-instance slack, linearly decayed to exactly zero at the horizon."""

    eps0: dict[int, float]
    decay_epochs: int

    def value(self, epoch: int, idx: int) -> float:
        if epoch >= self.decay_epochs:
            return 0.0
        return self.eps0[idx] * max(0.0, 1.0 - epoch / self.decay_epochs)

    def max_at(self, epoch: int) -> float:
        return max((self.value(epoch, i) for i in self.eps0), default=0.0)


def init_slack(
    model: Mlp, ds: Dataset, indices: Sequence[int], decay_epochs: int
) -> RelaxationSchedule:
    """Slack per instance = the model's current max violation of the original
    bounds, so repair at epoch 0 needs zero corrective iterations."""
    eps0 = {}
    for i in indices:
        out = forward(model, ds.x[i]).data
        eps0[int(i)] = ds.constraint_set(i).max_violation(out)
    return RelaxationSchedule(eps0, decay_epochs)


def objective_loss(y: Tensor, instance: ProblemInstance) -> Tensor:
    """The parametric objective f_x evaluated on the tape."""
    return instance.family.objective_tape(y)


def soft_loss(
    y_hat: Tensor, cs: ConstraintSet, base_loss: Tensor, mu_upper: float, mu_lower: float
) -> Tensor:
    """base + mu_u ||relu(g - u)||^2 + mu_l ||relu(lo - g)||^2 on the tape."""
    if mu_upper < 0 or mu_lower < 0:
        raise ContractError("penalty weights must be nonnegative")
    if cs.m == 0:
        return base_loss
    below, above = cs.relu_terms_tape(cs.g_tape(y_hat))
    return ad.add(
        base_loss,
        ad.add(
            ad.mul(ad.tensor(mu_upper), ad.sumsq(above)),
            ad.mul(ad.tensor(mu_lower), ad.sumsq(below)),
        ),
    )


@dataclass
class TrainConfig:
    epochs: int = 50
    decay_epochs: int = 30
    batch_size: int = 50
    lr: float = 1e-3
    optimizer: str = "adam"
    mu_upper: float = 10.0
    mu_lower: float = 10.0
    mode: str = "snare"
    seed: int = 0
    hidden: tuple[int, ...] = (200, 200)
    lam: float = 0.01
    tol: float = 1e-6
    max_repair_iters: int = 50
    soft_epochs: int = 50
    correction_steps: int = 10
    correction_lr: float = 1e-2
    loss: str = "objective"  # or "supervised" (regression onto oracle solutions)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ContractError("epochs, batch_size must be >= 1 and lr nonnegative")
        if self.mode == "snare" and not (0 < self.decay_epochs < self.epochs):
            raise ContractError(
                f"decay horizon must satisfy 0 < decay_epochs < epochs, "
                f"got {self.decay_epochs} vs {self.epochs}"
            )
        if self.loss not in ("objective", "supervised"):
            raise ContractError(f"loss must be 'objective' or 'supervised', got {self.loss!r}")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainResult:
    model: Mlp
    curves: list[dict]
    log: dict
    schedule: RelaxationSchedule | None = None


def _chunks(seq, size):
    for k in range(0, len(seq), size):
        yield seq[k : k + size]


def _train_step_output(
    cfg: TrainConfig, epoch: int, idx: int, y_hat: Tensor, cs: ConstraintSet, schedule
):
    """Mode-specific training-time output; returns (tensor, repair iterations)."""
    if cfg.mode == "snare":
        eps = schedule.value(epoch, idx)
        rc = RepairConfig(lam=cfg.lam, tol=cfg.tol, max_iters=cfg.max_repair_iters, eps=eps)
        y, trace = snare_repair(y_hat, cs, rc)
        return y, trace.iterations
    if cfg.mode == "soft-epochs-then-hard" and epoch > cfg.soft_epochs:
        rc = RepairConfig(lam=cfg.lam, tol=cfg.tol, max_iters=cfg.max_repair_iters, eps=0.0)
        y, trace = snare_repair(y_hat, cs, rc)
        return y, trace.iterations
    if cfg.mode == "penalty-grad":
        return correction_descent(y_hat, cs, cfg.correction_steps, cfg.correction_lr), 0
    return y_hat, 0


def _uses_soft_penalty(cfg: TrainConfig, epoch: int) -> bool:
    if cfg.mode == "soft" or cfg.mode == "penalty-grad":
        return True
    return cfg.mode == "soft-epochs-then-hard" and epoch <= cfg.soft_epochs


def predict_for_mode(
    cfg: TrainConfig, epoch: int, model: Mlp, ds: Dataset, idx: int, schedule
) -> np.ndarray:
    """Validation-time output for the active mode at this epoch."""
    y_hat = forward(model, ds.x[idx])
    cs = ds.constraint_set(idx)
    if cfg.mode == "snare":
        eps = schedule.value(epoch, idx) if schedule is not None else 0.0
        rc = RepairConfig(lam=cfg.lam, tol=cfg.tol, max_iters=cfg.max_repair_iters, eps=eps)
        return snare_repair(y_hat, cs, rc)[0].data
    if cfg.mode == "soft-epochs-then-hard" and epoch > cfg.soft_epochs:
        rc = RepairConfig(lam=cfg.lam, tol=cfg.tol, max_iters=cfg.max_repair_iters, eps=0.0)
        return snare_repair(y_hat, cs, rc)[0].data
    if cfg.mode == "penalty-grad":
        return correction_descent(y_hat, cs, cfg.correction_steps, cfg.correction_lr).data
    return y_hat.data


def _validation_row(cfg, epoch, model, ds, schedule) -> dict:
    gaps, ineq_rows, eq_rows = [], [], []
    for idx in ds.indices("valid"):
        inst = ds.instance(idx)
        if inst.f_star is None:
            raise ContractError(
                "validation curves need oracle objectives; run solve_oracle on the dataset"
            )
        y = predict_for_mode(cfg, epoch, model, ds, idx, schedule)
        gaps.append(inst.family.objective(y) - inst.f_star)
        cs = ds.constraint_set(idx)
        v = cs.violation(y)
        eq = cs.equality_mask
        ineq_rows.append(v[~eq])
        eq_rows.append(v[eq])
    agg = split_metrics(gaps, ineq_rows, eq_rows)
    return {
        "epoch": epoch,
        "seed": cfg.seed,
        "gmean_opt_gap": agg["gmean_opt_gap"],
        "max_opt_gap": agg["max_opt_gap"],
        "gmean_ineq_viol": agg["gmean_ineq_error"],
        "max_ineq_viol": agg["max_ineq_error"],
        "gmean_eq_viol": agg["gmean_eq_error"],
        "max_eq_viol": agg["max_eq_error"],
    }


def train(cfg: TrainConfig, ds: Dataset) -> TrainResult:
    """Run the full training loop; deterministic given config and seed."""
    if ds.family.n_eq < 1:
        raise ContractError("training needs at least one equality input dimension")
    if cfg.loss == "supervised" and any(
        ds.instance(i).f_star is None for i in ds.indices("train")
    ):
        raise ContractError("supervised loss needs oracle solutions on the train split")

    model = init_weights([ds.family.n_eq, *cfg.hidden, ds.family.n], seed=cfg.seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr)
    rng = substream(cfg.seed, "shuffle")
    train_idx = ds.indices("train")

    schedule = None
    if cfg.mode == "snare":
        schedule = init_slack(
            model, ds, ds.indices("train") + ds.indices("valid"), cfg.decay_epochs
        )

    curves: list[dict] = []
    log: dict = {"mode": cfg.mode, "epochs": []}
    for epoch in range(1, cfg.epochs + 1):
        order = [int(i) for i in rng.permutation(train_idx)]
        train_viol_max = 0.0
        repair_calls = 0
        repair_iters = 0
        for batch in _chunks(order, cfg.batch_size):
            loss_terms = []
            for idx in batch:
                inst = ds.instance(idx)
                cs = ds.constraint_set(idx)
                y_hat = forward(model, ds.x[idx])
                y_out, iters = _train_step_output(cfg, epoch, idx, y_hat, cs, schedule)
                if cfg.mode in ("snare",) or (
                    cfg.mode == "soft-epochs-then-hard" and epoch > cfg.soft_epochs
                ):
                    repair_calls += 1
                    repair_iters += iters
                if cfg.loss == "supervised":
                    base = ad.sumsq(ad.sub(y_out, ad.tensor(inst.y_star)))
                else:
                    base = objective_loss(y_out, inst)
                loss_i = (
                    soft_loss(y_out, cs, base, cfg.mu_upper, cfg.mu_lower)
                    if _uses_soft_penalty(cfg, epoch)
                    else base
                )
                if not np.isfinite(loss_i.item()):
                    raise TrainingDivergedError(
                        f"nonfinite loss at epoch {epoch}, instance {idx} (mode {cfg.mode})"
                    )
                train_viol_max = max(train_viol_max, cs.max_violation(y_out.data))
                loss_terms.append(ad.reshape(loss_i, (1,)))
            batch_loss = ad.mul(ad.tensor(1.0 / len(batch)), ad.total(ad.concat(loss_terms)))
            grads = ad.backward(batch_loss)
            params = model.parameters()
            arrays = [p.data for p in params]
            gs = [grads.get(p, np.zeros_like(p.data)) for p in params]
            model.assign_parameters(opt.step(arrays, gs))

        curves.append(_validation_row(cfg, epoch, model, ds, schedule))
        log["epochs"].append(
            {
                "epoch": epoch,
                "train_max_violation": train_viol_max,
                "repair_calls": repair_calls,
                "repair_iterations": repair_iters,
                "max_slack": schedule.max_at(epoch) if schedule else 0.0,
            }
        )
    return TrainResult(model=model, curves=curves, log=log, schedule=schedule)
