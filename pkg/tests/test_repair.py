import json

import numpy as np
import pytest

from snarekit import autodiff as ad
from snarekit.constraints import Bounds, ConstraintSet, LinearMap, box_project
from snarekit.errors import ContractError, RankDeficiencyError, SingularMatrixError
from snarekit.repair import (
    RepairConfig,
    RepairTrace,
    hardnet_repair,
    posthoc_project,
    snare_repair,
)

from conftest import central_diff, rel_err, two_disk_set


def random_linear_system(rng, full_rank=True):
    n = rng.integers(2, 7)
    m = rng.integers(1, n + 1) if full_rank else n + rng.integers(1, 3)
    a = rng.standard_normal((m, n))
    y0 = rng.standard_normal(n)
    lo = a @ y0 - np.abs(rng.standard_normal(m)) - 0.1
    up = lo + np.abs(rng.standard_normal(m)) + 0.2
    lo = np.where(rng.random(m) < 0.25, -np.inf, lo)
    up = np.where(rng.random(m) < 0.25, np.inf, up)
    keep = np.isfinite(lo) | np.isfinite(up)
    lo[~keep] = 0.0  # avoid fully unconstrained rows
    return a, Bounds(lo, up)


class TestSnareRepair:
    def test_two_disk_fixture_reaches_feasibility(self):
        cs = two_disk_set()
        cfg = RepairConfig(lam=0.1, tol=1e-8, eps=0.0)
        y, trace = snare_repair(np.array([-1.0, 0.0]), cs, cfg)
        g = cs.g(y.data)
        assert g[0] <= 9 / 4 + 1e-8
        assert g[1] <= 9 / 4 + 1e-8
        assert trace.converged

    def test_feasible_input_is_identity(self):
        cs = two_disk_set()
        y_hat = ad.tensor([0.0, 0.0])
        y, trace = snare_repair(y_hat, cs, RepairConfig())
        assert y is y_hat
        assert len(trace.iterates) == 1
        assert trace.iterations == 0

    def test_reduces_to_hardnet_on_linear_constraints(self, rng):
        cfg = RepairConfig(lam=0.0, tol=1e-9, eps=0.0)
        for _ in range(50):
            a, bounds = random_linear_system(rng)
            cs = ConstraintSet([LinearMap(a)], bounds)
            y_hat = rng.standard_normal(a.shape[1]) * 2.0
            expect = hardnet_repair(y_hat, a, bounds)
            got, trace = snare_repair(y_hat, cs, cfg)
            assert np.max(np.abs(got.data - expect)) < 1e-10
            if cs.max_violation(y_hat) > cfg.tol:
                assert trace.iterations == 1

    def test_idempotent_within_one_check(self):
        cs = two_disk_set()
        cfg = RepairConfig(lam=0.1, tol=1e-8)
        y, _ = snare_repair(np.array([-1.0, 0.0]), cs, cfg)
        y2, trace2 = snare_repair(y.data, cs, cfg)
        assert len(trace2.iterates) == 1
        assert np.array_equal(y2.data, y.data)

    @pytest.mark.parametrize("tol", [1e-4, 1e-6, 1e-8, 1e-10, 1e-12])
    def test_feasibility_control_across_tolerances(self, tol):
        cs = two_disk_set()
        cfg = RepairConfig(lam=0.1, tol=tol, max_iters=100)
        for start in ([-1.0, 0.0], [2.5, 1.0], [0.0, 3.0], [-2.0, -2.0]):
            y, trace = snare_repair(np.array(start), cs, cfg)
            assert trace.converged
            assert cs.max_violation(y.data) <= tol

    def test_iter_cap_returns_flagged_iterate(self):
        cs = two_disk_set()
        cfg = RepairConfig(lam=10.0, tol=1e-12, max_iters=2)
        y, trace = snare_repair(np.array([5.0, 5.0]), cs, cfg)
        assert trace.reason == "iter-cap"
        assert len(trace.iterates) == cfg.max_iters + 1
        assert np.all(np.isfinite(y.data))

    def test_singular_solve_at_lam_zero_names_fix(self):
        a = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])  # rank 1
        cs = ConstraintSet([LinearMap(a)], Bounds(np.zeros(3), np.zeros(3)))
        with pytest.raises(SingularMatrixError, match="lam > 0"):
            snare_repair(np.array([3.0, 4.0]), cs, RepairConfig(lam=0.0))

    def test_gradient_matches_finite_differences(self):
        # starts chosen to land with exactly one active constraint; the
        # two-circle corner is a genuine nondifferentiable point and excluded
        cs = two_disk_set()
        cfg = RepairConfig(lam=0.1, tol=1e-10, max_iters=60)
        w = np.array([0.7, -1.3])
        for start in ([-1.3, 0.4], [-0.5, 0.9], [-0.9, -1.0], [0.3, -0.8]):
            y0 = np.array(start)

            def loss(yv):
                y, _ = snare_repair(np.asarray(yv), cs, cfg)
                return float(y.data @ w)

            leaf = ad.tensor(y0)
            y, _ = snare_repair(leaf, cs, cfg)
            assert np.sum(np.abs(cs.g(y.data) - 9 / 4) < 1e-6) == 1
            ad.backward(ad.dot(y, ad.tensor(w)))
            fd = central_diff(loss, y0)
            assert rel_err(leaf.grad, fd) < 1e-4

    def test_relaxed_repair_targets_relaxed_box(self):
        cs = two_disk_set()
        cfg = RepairConfig(lam=0.1, tol=1e-8, eps=1.0)
        y, trace = snare_repair(np.array([-1.0, 0.0]), cs, cfg)
        # (-1, 0) violates the relaxed second bound 9/4 + 1 by 0.75, so repair runs
        assert trace.iterations >= 1
        assert cs.max_violation(y.data, eps=1.0) <= 1e-8
        assert cs.max_violation(y.data) > 0  # original bounds still violated

    def test_empty_constraint_set_is_identity(self):
        cs = ConstraintSet([], Bounds(np.zeros(0), np.zeros(0)))
        y, trace = snare_repair(np.array([1.0, 2.0]), cs, RepairConfig())
        assert np.array_equal(y.data, [1.0, 2.0])
        assert trace.converged

    def test_invalid_config_rejected(self):
        with pytest.raises(ContractError):
            RepairConfig(tol=0.0)
        with pytest.raises(ContractError):
            RepairConfig(max_iters=0)
        with pytest.raises(ContractError):
            RepairConfig(lam=-1.0)


class TestHardnetRepair:
    def test_identity_matrix_reduces_to_box_projection(self):
        bounds = Bounds(np.zeros(3), np.ones(3))
        got = hardnet_repair(np.array([-1.0, 0.5, 2.0]), np.eye(3), bounds)
        assert np.allclose(got, [0.0, 0.5, 1.0], atol=1e-14)

    def test_feasible_input_unchanged(self, rng):
        for _ in range(20):
            a = rng.standard_normal((3, 5))
            y0 = rng.standard_normal(5)
            z0 = a @ y0
            bounds = Bounds(z0 - 0.5, z0 + 0.5)  # y0 strictly interior
            assert np.array_equal(hardnet_repair(y0, a, bounds), y0)

    def test_per_row_case_analysis(self, rng):
        for _ in range(50):
            a = rng.standard_normal((3, 5))
            y0 = rng.standard_normal(5)
            lo = a @ y0 - np.abs(rng.standard_normal(3))
            bounds = Bounds(lo, lo + np.abs(rng.standard_normal(3)) + 0.1)
            y_hat = rng.standard_normal(5) * 2
            z = a @ y_hat
            repaired = a @ hardnet_repair(y_hat, a, bounds)
            for i in range(3):
                if z[i] < bounds.lower[i]:
                    assert abs(repaired[i] - bounds.lower[i]) < 1e-10
                elif z[i] > bounds.upper[i]:
                    assert abs(repaired[i] - bounds.upper[i]) < 1e-10
                else:
                    assert abs(repaired[i] - z[i]) < 1e-10

    def test_rank_deficient_rejected(self):
        a = np.array([[1.0, 2.0], [2.0, 4.0]])
        with pytest.raises(RankDeficiencyError, match="snare_repair"):
            hardnet_repair(np.zeros(2), a, Bounds(np.zeros(2), np.ones(2)))

    def test_too_many_rows_rejected(self, rng):
        a = rng.standard_normal((5, 3))
        with pytest.raises(RankDeficiencyError):
            hardnet_repair(np.zeros(3), a, Bounds(-np.ones(5), np.ones(5)))


class TestPosthocProject:
    def test_feasible_point_unchanged(self):
        cs = two_disk_set()
        res = posthoc_project(np.array([0.0, 0.5]), cs)
        assert res.distance == 0.0
        assert np.array_equal(res.y, [0.0, 0.5])

    def test_box_constraints_reduce_to_box_projection(self, rng):
        bounds = Bounds(np.zeros(3), np.ones(3))
        cs = ConstraintSet([LinearMap(np.eye(3))], bounds)
        z = rng.standard_normal(3) * 3
        res = posthoc_project(z, cs)
        assert np.allclose(res.y, box_project(z, bounds), atol=1e-6)

    def test_two_disk_projection_optimality(self, rng):
        cs = two_disk_set()
        y_hat = np.array([-1.0, 0.0])
        res = posthoc_project(y_hat, cs)
        assert res.converged and res.max_violation <= 1e-6
        # lands on the right-disk boundary at (-1/2, 0)
        assert abs(cs.g(res.y)[1] - 9 / 4) < 1e-4
        assert np.allclose(res.y, [-0.5, 0.0], atol=1e-3)
        # no rejection-sampled feasible point does better
        samples = np.column_stack(
            [rng.uniform(-0.6, 0.6, 200_000), rng.uniform(-1.2, 1.2, 200_000)]
        )
        g1 = (samples[:, 0] + 1) ** 2 + samples[:, 1] ** 2
        g2 = (samples[:, 0] - 1) ** 2 + samples[:, 1] ** 2
        feas = samples[(g1 <= 9 / 4) & (g2 <= 9 / 4)]
        assert feas.shape[0] >= 10_000
        dists = np.linalg.norm(feas - y_hat, axis=1)
        assert res.distance <= dists.min() + 1e-9


class TestRepairTrace:
    def test_json_round_trip_fields(self):
        cs = two_disk_set()
        _, trace = snare_repair(np.array([-1.0, 0.0]), cs, RepairConfig(lam=0.1, tol=1e-8))
        blob = json.loads(trace.to_json())
        assert blob["termination"] == "tol-met"
        assert blob["iterates"] == len(trace.iterates)
        assert len(blob["violations"]) == blob["iterates"]
        assert blob["violations"][-1] <= 1e-8
