import numpy as np
import pytest

from snarekit import autodiff as ad
from snarekit.errors import ContractError
from snarekit.problems import (
    Dataset,
    NcpFamily,
    QcqpFamily,
    ProblemInstance,
    generate,
    grid_search_reference,
    make_family,
    oracle_solve,
    solve_oracle,
    to_constraint_set,
)

from conftest import rel_err


class TestGenerate:
    def test_deterministic_bytes(self, tmp_path):
        p1, p2 = str(tmp_path / "a.json"), str(tmp_path / "b.json")
        generate("qcqp", n=6, n_eq=3, n_ineq=4, count=10, seed=7).save(p1)
        generate("qcqp", n=6, n_eq=3, n_ineq=4, count=10, seed=7).save(p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_witness_margin_certified(self):
        for fam_name in ("ncp", "qcqp"):
            ds = generate(fam_name, n=8, n_eq=4, n_ineq=6, count=30, seed=3)
            for i in range(ds.count):
                inst = ds.instance(i)
                fam = inst.family
                slack = fam.inequality_rhs() - fam.inequality_values(inst.witness)
                assert slack.min() >= 1e-3
                assert np.allclose(fam.c @ inst.witness, inst.x, atol=1e-12)

    def test_split_ratio_recorded(self):
        ds = generate("ncp", n=4, n_eq=2, n_ineq=3, count=100, seed=1)
        assert len(ds.split["train"]) == 80
        assert len(ds.split["valid"]) == 10
        assert len(ds.split["test"]) == 10
        assert sorted(ds.split["train"] + ds.split["valid"] + ds.split["test"]) == list(range(100))

    def test_micro_family_is_generable(self):
        ds = generate("qcqp", n=2, n_eq=1, n_ineq=1, count=3, seed=5)
        cs = ds.constraint_set(0)
        assert cs.m == 2
        assert np.isinf(cs.bounds.lower[0]) and cs.bounds.upper[0] == 1.0
        assert cs.bounds.lower[1] == cs.bounds.upper[1] == ds.x[0, 0]

    def test_invalid_dims_rejected(self):
        with pytest.raises(ContractError):
            generate("qcqp", n=3, n_eq=5, n_ineq=2, count=5, seed=0)
        with pytest.raises(ContractError):
            make_family("bogus", 3, 1, 1, 0)

    def test_family_invariants(self):
        ncp = make_family("ncp", 6, 3, 4, seed=2)
        assert np.allclose(ncp.q, ncp.q.T)
        assert np.linalg.eigvalsh(ncp.q).min() > 0
        assert np.allclose(ncp.c @ ncp.c.T, np.eye(3), atol=1e-12)  # orthonormal rows
        qcqp = make_family("qcqp", 6, 3, 4, seed=2)
        for h in qcqp.h_quad:
            assert np.linalg.eigvalsh(h).min() >= -1e-12


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = generate("ncp", n=5, n_eq=2, n_ineq=4, count=12, seed=9)
        solve_oracle(ds, indices=[0, 1])
        path = str(tmp_path / "ds.json")
        ds.save(path)
        back = Dataset.load(path)
        assert np.array_equal(back.x, ds.x)
        assert np.array_equal(back.witness, ds.witness)
        assert np.array_equal(back.oracle_y, ds.oracle_y)
        assert back.oracle_status == ds.oracle_status
        assert back.split == ds.split
        for k in ("q", "p", "a", "b", "c"):
            assert np.array_equal(getattr(back.family, k), getattr(ds.family, k))
        path2 = str(tmp_path / "ds2.json")
        back.save(path2)
        assert open(path, "rb").read() == open(path2, "rb").read()


class TestConstraintMapping:
    def test_ncp_rows_linear(self, rng):
        ds = generate("ncp", n=5, n_eq=2, n_ineq=3, count=2, seed=4)
        cs = ds.constraint_set(0)
        y = rng.standard_normal(5)
        fam = ds.family
        assert np.allclose(cs.g(y), np.concatenate([fam.a @ y, fam.c @ y]), atol=1e-14)
        assert np.array_equal(cs.jacobian(y)[:3], fam.a)

    def test_qcqp_jacobian_matches_ad(self, rng):
        ds = generate("qcqp", n=4, n_eq=2, n_ineq=3, count=2, seed=4)
        cs = ds.constraint_set(1)
        for _ in range(100):
            y = rng.standard_normal(4)
            jac = cs.jacobian(y)
            yt = ad.tensor(y)
            gval = cs.g_tape(yt)
            for row in range(cs.m):
                grads = ad.backward(gval[row])
                assert rel_err(grads[yt], jac[row]) < 1e-10

    def test_equality_block_bounds(self):
        ds = generate("qcqp", n=4, n_eq=2, n_ineq=3, count=2, seed=4)
        cs = ds.constraint_set(0)
        assert np.array_equal(cs.bounds.lower[3:], ds.x[0])
        assert np.array_equal(cs.bounds.upper[3:], ds.x[0])
        assert np.array_equal(cs.equality_mask, [False] * 3 + [True] * 2)


class TestOracle:
    def test_unconstrained_quadratic(self):
        fam = QcqpFamily(
            q=np.eye(3),
            p=np.zeros(3),
            h_quad=np.zeros((1, 3, 3)),
            g_lin=np.zeros((1, 3)),
            h_rhs=np.array([100.0]),
            c=np.zeros((0, 3)),
        )
        inst = ProblemInstance(fam, 0, np.zeros(0), np.zeros(3))
        y, f, res = oracle_solve(inst)
        assert np.allclose(y, 0.0, atol=1e-8)
        assert abs(f) < 1e-12
        assert res <= 1e-8
        assert inst.status == "optimal"

    def test_equality_pins_solution(self):
        fam = QcqpFamily(
            q=np.eye(1),
            p=np.zeros(1),
            h_quad=np.zeros((0, 1, 1)),
            g_lin=np.zeros((0, 1)),
            h_rhs=np.zeros(0),
            c=np.eye(1),
        )
        inst = ProblemInstance(fam, 0, np.array([2.0]), np.array([2.0]))
        y, f, res = oracle_solve(inst)
        assert abs(y[0] - 2.0) < 1e-9
        assert abs(f - 2.0) < 1e-9

    def test_qcqp_residual_target(self):
        ds = generate("qcqp", n=6, n_eq=3, n_ineq=4, count=6, seed=8)
        solve_oracle(ds)
        assert np.all(ds.oracle_residual <= 1e-8)
        assert all(s == "optimal" for s in ds.oracle_status)

    def test_ncp_multistart_labels_local(self):
        ds = generate("ncp", n=4, n_eq=2, n_ineq=3, count=4, seed=8)
        solve_oracle(ds)
        assert np.all(ds.oracle_residual <= 1e-6)
        assert all(s == "local-optimal" for s in ds.oracle_status)

    @pytest.mark.parametrize("fam_name", ["ncp", "qcqp"])
    def test_matches_grid_search_on_2d(self, fam_name):
        ds = generate(fam_name, n=2, n_eq=1, n_ineq=1, count=5, seed=13)
        solve_oracle(ds)
        for i in range(ds.count):
            ref = grid_search_reference(ds.instance(i), resolution=1e-4)
            assert abs(ds.oracle_f[i] - ref) <= 1e-3

    def test_solution_cached_into_instance(self):
        ds = generate("qcqp", n=3, n_eq=1, n_ineq=2, count=2, seed=2)
        solve_oracle(ds, indices=[1])
        inst = ds.instance(1)
        assert inst.status == "optimal"
        assert inst.f_star is not None and inst.kkt_residual <= 1e-8
        assert ds.instance(0).status == "unsolved"
