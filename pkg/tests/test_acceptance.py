"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The training fixtures are
session-scoped and shared across criteria; the whole suite is CPU-only.
"""

import sys

import numpy as np
import pytest

from snarekit import autodiff as ad
from snarekit.constraints import Bounds, ConstraintSet, LinearMap, box_project
from snarekit.control import (
    Scenario,
    make_policy,
    rollout,
    sample_initial_states,
    train_policy,
)
from snarekit.errors import RankDeficiencyError
from snarekit.evaluation import evaluate_split, gmean, method_predictor
from snarekit.models import Mlp, forward, init_weights
from snarekit.problems import generate, grid_search_reference, solve_oracle
from snarekit.repair import RepairConfig, hardnet_repair, snare_repair
from snarekit.training import TrainConfig, init_slack, train

from conftest import central_diff, rel_err, two_disk_set

DESK_SEEDS = (0, 1, 2)
DESK_TRAIN = dict(
    epochs=50, decay_epochs=30, batch_size=100, lr=1e-3,
    hidden=(200, 200), tol=1e-6, lam=0.01,
)


def record(num: int, desc: str, ok: bool) -> None:
    print(f"[ACCEPTANCE {num}] {'PASS' if ok else 'FAIL'} - {desc}", file=sys.stderr, flush=True)
    assert ok, f"criterion {num} failed: {desc}"


@pytest.fixture(scope="session")
def desk_qcqp():
    ds = generate("qcqp", n=20, n_eq=10, n_ineq=10, count=1000, seed=101)
    solve_oracle(ds, indices=ds.indices("valid") + ds.indices("test"))
    return ds


@pytest.fixture(scope="session")
def snare_runs(desk_qcqp):
    return {
        seed: train(TrainConfig(mode="snare", seed=seed, **DESK_TRAIN), desk_qcqp)
        for seed in DESK_SEEDS
    }


@pytest.fixture(scope="session")
def soft_runs(desk_qcqp):
    return {
        seed: train(TrainConfig(mode="soft", seed=seed, **DESK_TRAIN), desk_qcqp)
        for seed in DESK_SEEDS
    }


@pytest.fixture(scope="session")
def penalty_grad_runs(desk_qcqp):
    return {
        seed: train(TrainConfig(mode="penalty-grad", seed=seed, **DESK_TRAIN), desk_qcqp)
        for seed in DESK_SEEDS
    }


def test_criterion_1_feasibility_control(desk_qcqp, snare_runs):
    ds = desk_qcqp
    test_idx = ds.indices("test")
    assert len(test_idx) == 100
    worst = 0.0
    for seed, result in snare_runs.items():
        for tol in (1e-4, 1e-6, 1e-8):
            predict = method_predictor("snare", result.model, ds, tol=tol, lam=0.01, max_iters=200)
            rpt = evaluate_split(ds, test_idx, predict, "snare", seed, tol)
            worst = max(worst, rpt.max_eq_error / tol, rpt.max_ineq_error / tol)
            assert rpt.max_eq_error <= tol, (seed, tol, rpt.max_eq_error)
            assert rpt.max_ineq_error <= tol, (seed, tol, rpt.max_ineq_error)
    record(1, f"tol sweep feasibility on desk QCQP, worst error/tol = {worst:.3f}", worst <= 1.0)


def test_criterion_2_hardnet_reduction():
    rng = np.random.default_rng(2024)
    max_diff = 0.0
    max_case_err = 0.0
    cfg = RepairConfig(lam=0.0, tol=1e-9, eps=0.0)
    for _ in range(1000):
        n = int(rng.integers(2, 9))
        m = int(rng.integers(1, n + 1))
        a = rng.standard_normal((m, n))
        y0 = rng.standard_normal(n)
        lo = a @ y0 - np.abs(rng.standard_normal(m)) - 0.1
        up = lo + np.abs(rng.standard_normal(m)) + 0.2
        lo = np.where(rng.random(m) < 0.25, -np.inf, lo)
        bounds = Bounds(lo, up)
        y_hat = rng.standard_normal(n) * 2.0
        expect = hardnet_repair(y_hat, a, bounds)
        cs = ConstraintSet([LinearMap(a)], bounds)
        got, trace = snare_repair(y_hat, cs, cfg)
        max_diff = max(max_diff, float(np.max(np.abs(got.data - expect))))
        if cs.max_violation(y_hat) > cfg.tol:
            assert trace.iterations == 1
        z = a @ y_hat
        repaired = a @ expect
        for i in range(m):
            if z[i] < bounds.lower[i]:
                max_case_err = max(max_case_err, abs(repaired[i] - bounds.lower[i]))
            elif z[i] > bounds.upper[i]:
                max_case_err = max(max_case_err, abs(repaired[i] - bounds.upper[i]))
            else:
                max_case_err = max(max_case_err, abs(repaired[i] - z[i]))
    record(
        2,
        f"1000 systems: one-iteration match (max diff {max_diff:.2e}), "
        f"per-row case analysis (max err {max_case_err:.2e})",
        max_diff < 1e-10 and max_case_err < 1e-10,
    )


def test_criterion_3_example_one_fixture():
    cs = two_disk_set()
    target = np.array([0.0, 9 / 4])
    proj = box_project(cs.g(np.array([-1.0, 0.0])), cs.bounds)
    exact = bool(np.array_equal(proj, target))

    def residual(y):
        return float(np.linalg.norm(cs.g(y) - target))

    rng = np.random.default_rng(7)
    samples = rng.uniform(-3.0, 3.0, size=(100_000, 2))
    g1 = (samples[:, 0] + 1) ** 2 + samples[:, 1] ** 2
    g2 = (samples[:, 0] - 1) ** 2 + samples[:, 1] ** 2
    res_samples = np.sqrt(g1**2 + (g2 - 9 / 4) ** 2)
    min_sample = float(res_samples.min())

    # gradient descent on the squared residual from 100 starts
    min_gd = np.inf
    for start in rng.uniform(-3.0, 3.0, size=(100, 2)):
        y = start.copy()
        step = 0.05
        val = residual(y) ** 2
        for _ in range(400):
            grad = 2.0 * cs.jacobian(y).T @ (cs.g(y) - target)
            while step > 1e-14:
                cand = y - step * grad
                cand_val = residual(cand) ** 2
                if cand_val < val:
                    y, val = cand, cand_val
                    step *= 1.5
                    break
                step *= 0.5
            if step <= 1e-14 or np.linalg.norm(grad) < 1e-12:
                break
        min_gd = min(min_gd, np.sqrt(val))

    y, trace = snare_repair(np.array([-1.0, 0.0]), cs, RepairConfig(lam=0.1, tol=1e-8))
    feas = cs.max_violation(y.data) <= 1e-8
    record(
        3,
        f"projection exact={exact}; preimage residual >= 0.1 "
        f"(sampling {min_sample:.3f}, descent {min_gd:.3f}); repair feasible to 1e-8",
        exact and min_sample >= 0.1 and min_gd >= 0.1 and feas and trace.converged,
    )


def test_criterion_4_end_to_end_gradient():
    cs = two_disk_set()
    cfg = RepairConfig(lam=0.1, tol=1e-10, max_iters=80)
    model = init_weights([2, 8, 2], seed=12)
    x_in = np.array([0.8, -0.4])
    target = np.array([0.4, -0.2])

    def loss_from_flat(flat):
        arrays, k = [], 0
        for p in model.parameter_arrays():
            arrays.append(flat[k : k + p.size].reshape(p.shape))
            k += p.size
        probe = Mlp(
            model.widths,
            [ad.tensor(a) for a in arrays[: len(model.weights)]],
            [ad.tensor(a) for a in arrays[len(model.weights) :]],
        )
        y_hat = forward(probe, x_in)
        y, _ = snare_repair(y_hat, cs, cfg)
        return ad.sumsq(ad.sub(y, ad.tensor(target))).item()

    y_hat = forward(model, x_in)
    y, _ = snare_repair(y_hat, cs, cfg)
    active = np.abs(cs.g(y.data) - 9 / 4) < 1e-6
    assert active.sum() == 1  # differentiable point: exactly one active constraint
    loss = ad.sumsq(ad.sub(y, ad.tensor(target)))
    grads = ad.backward(loss)
    got = np.concatenate([grads[p].ravel() for p in model.parameters()])
    flat0 = np.concatenate([p.ravel() for p in model.parameter_arrays()])
    fd = central_diff(loss_from_flat, flat0)
    err = rel_err(got, fd)
    record(4, f"repair-through-MLP gradient vs finite differences, rel err {err:.2e}", err < 1e-4)


def test_criterion_5_adaptive_relaxation(desk_qcqp, snare_runs):
    ds = desk_qcqp
    cfg = TrainConfig(mode="snare", seed=0, **DESK_TRAIN)
    model = init_weights([ds.family.n_eq, *cfg.hidden, ds.family.n], seed=cfg.seed)
    schedule = init_slack(model, ds, ds.indices("train"), cfg.decay_epochs)
    noop = True
    for idx in ds.indices("train"):
        y_hat = forward(model, ds.x[idx])
        rc = RepairConfig(lam=cfg.lam, tol=cfg.tol, eps=schedule.value(0, idx))
        _, trace = snare_repair(y_hat, ds.constraint_set(idx), rc)
        if trace.iterations != 0:
            noop = False
            break

    slack_vals = [schedule.max_at(t) for t in range(cfg.epochs + 1)]
    monotone = all(a >= b for a, b in zip(slack_vals, slack_vals[1:]))
    zero_after = all(schedule.max_at(t) == 0.0 for t in range(cfg.decay_epochs, cfg.epochs + 1))

    result = snare_runs[0]
    post = [row for row in result.log["epochs"] if row["epoch"] >= cfg.decay_epochs]
    post_ok = all(row["train_max_violation"] <= cfg.tol for row in post)
    worst_post = max(row["train_max_violation"] for row in post)
    record(
        5,
        "slack snares at init (0 corrective iterations), decays monotonically to 0, "
        f"post-horizon train violation {worst_post:.2e} <= tol",
        noop and monotone and zero_after and post_ok,
    )


def test_criterion_6_optimality_direction(desk_qcqp, snare_runs, soft_runs, penalty_grad_runs):
    ds = desk_qcqp
    test_idx = ds.indices("test")

    def mean_gmean_gap(runs, method):
        gaps = []
        for seed, result in runs.items():
            predict = method_predictor(method, result.model, ds, tol=1e-6, lam=0.01, max_iters=200)
            rpt = evaluate_split(ds, test_idx, predict, method, seed, 1e-6)
            gaps.append(rpt.gmean_opt_gap)
        return float(np.mean(gaps))

    snare_gap = mean_gmean_gap(snare_runs, "snare")
    posthoc_gap = mean_gmean_gap(soft_runs, "posthoc")
    pg_gap = mean_gmean_gap(penalty_grad_runs, "penalty-grad")
    record(
        6,
        f"gmean optimality gap: snare {snare_gap:.4f} < posthoc {posthoc_gap:.4f} "
        f"and < penalty-grad {pg_gap:.4f}",
        snare_gap < posthoc_gap and snare_gap < pg_gap,
    )


def test_criterion_7_many_constraints():
    ds = generate("ncp", n=20, n_eq=10, n_ineq=60, count=300, seed=77)
    fam = ds.family
    stacked = np.vstack([fam.a, fam.c])
    rejected = False
    try:
        hardnet_repair(np.zeros(20), stacked, ds.constraint_set(0).bounds)
    except RankDeficiencyError:
        rejected = True

    model = init_weights([10, 64, 20], seed=5)
    cfg = RepairConfig(lam=0.01, tol=1e-4, max_iters=500)
    n_feasible = 0
    test_idx = ds.indices("test")
    for i in test_idx:
        cs = ds.constraint_set(i)
        y, _ = snare_repair(forward(model, ds.x[i]), cs, cfg)
        n_feasible += cs.max_violation(y.data) <= 1e-4
    record(
        7,
        f"70x20 stacked matrix rejected by closed-form repair; iterative repair feasible on "
        f"{n_feasible}/{len(test_idx)} test instances at 1e-4",
        rejected and n_feasible == len(test_idx),
    )


def test_criterion_8_cbf_rollout_safety():
    import importlib.resources as res

    with res.as_file(res.files("snarekit") / "scenarios" / "three_obstacles.json") as p:
        scenario = Scenario.load(str(p))
    assert len(scenario.obstacles) == 3

    policy, _ = train_policy(
        scenario, n_starts=24, epochs=40, decay_epochs=20, lr=5e-4, hidden=(32, 32), seed=1
    )
    starts = sample_initial_states(20, 123, scenario)
    min_clearance = np.inf
    for x0 in starts:
        r = rollout(policy, x0, scenario.rollout, scenario.obstacles, steps=scenario.eval_steps)
        min_clearance = min(min_clearance, float(r.clearances.min()))

    nominal = make_policy(scenario, hidden=(4,), seed=0)  # zero head: pure nominal
    nominal_collides = False
    for x0 in starts:
        r = rollout(
            nominal, x0, scenario.rollout, scenario.obstacles,
            steps=150, repaired=False, use_correction=False,
        )
        if r.clearances.min() < 0:
            nominal_collides = True
            break
    record(
        8,
        f"trained policy min clearance {min_clearance:.4f} >= -1e-3 over 20 starts; "
        f"nominal alone collides = {nominal_collides}",
        min_clearance >= -1e-3 and nominal_collides,
    )


def test_criterion_9_oracle_validity(desk_qcqp):
    worst_gap = 0.0
    for fam_name in ("ncp", "qcqp"):
        ds = generate(fam_name, n=2, n_eq=1, n_ineq=1, count=50, seed=31)
        solve_oracle(ds)
        for i in range(ds.count):
            ref = grid_search_reference(ds.instance(i), resolution=1e-4)
            worst_gap = max(worst_gap, abs(float(ds.oracle_f[i]) - ref))

    solved = [i for i, s in enumerate(desk_qcqp.oracle_status) if s != "unsolved"]
    worst_res = float(np.max(desk_qcqp.oracle_residual[solved]))
    record(
        9,
        f"grid-search agreement within {worst_gap:.2e} (tol 1e-3); "
        f"desk QCQP KKT residual max {worst_res:.2e} <= 1e-8",
        worst_gap <= 1e-3 and worst_res <= 1e-8,
    )
