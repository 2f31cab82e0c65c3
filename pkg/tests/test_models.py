import numpy as np
import pytest

from snarekit import autodiff as ad
from snarekit.errors import ContractError, ShapeError
from snarekit.models import Mlp, forward, init_weights, load_checkpoint, save_checkpoint

from conftest import central_diff, rel_err


class TestInit:
    def test_same_seed_identical(self):
        a = init_weights([3, 8, 2], seed=5)
        b = init_weights([3, 8, 2], seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a = init_weights([3, 8, 2], seed=5)
        b = init_weights([3, 8, 2], seed=6)
        assert any(not np.array_equal(pa.data, pb.data) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_param_count(self):
        assert init_weights([2, 4, 2], seed=0).n_params == 2 * 4 + 4 + 4 * 2 + 2

    def test_biases_zero(self):
        m = init_weights([2, 4, 2], seed=0)
        for b in m.biases:
            assert np.array_equal(b.data, np.zeros_like(b.data))

    def test_rejects_trivial_widths(self):
        with pytest.raises(ContractError):
            init_weights([4], seed=0)


class TestForward:
    def test_zero_final_layer_outputs_zero(self, rng):
        m = init_weights([3, 16, 2], seed=1).zero_final_layer()
        for _ in range(5):
            out = forward(m, rng.standard_normal(3))
            assert np.array_equal(out.data, np.zeros(2))

    def test_single_linear_layer_matches_matmul(self, rng):
        m = init_weights([4, 3], seed=2)
        x = rng.standard_normal(4)
        w, b = m.weights[0].data, m.biases[0].data
        assert np.allclose(forward(m, x).data, x @ w + b, atol=1e-14)

    def test_deterministic_given_seed_and_input(self):
        x = np.array([0.3, -0.7, 1.1])
        out1 = forward(init_weights([3, 32, 32, 2], seed=9), x).data
        out2 = forward(init_weights([3, 32, 32, 2], seed=9), x).data
        assert np.array_equal(out1, out2)

    def test_batch_rows_match_single(self, rng):
        m = init_weights([3, 8, 2], seed=3)
        xs = rng.standard_normal((5, 3))
        batch = forward(m, xs).data
        for i in range(5):
            assert np.allclose(batch[i], forward(m, xs[i]).data, atol=1e-14)

    def test_dimension_mismatch(self):
        m = init_weights([3, 2], seed=0)
        with pytest.raises(ShapeError):
            forward(m, np.zeros(4))


class TestGradients:
    def test_mse_gradient_matches_finite_differences(self, rng):
        m = init_weights([2, 6, 2], seed=4)
        x = rng.standard_normal(2)
        target = rng.standard_normal(2)

        def mse_at(flat):
            arrays, k = [], 0
            for p in m.parameter_arrays():
                arrays.append(flat[k:k + p.size].reshape(p.shape))
                k += p.size
            probe = Mlp(m.widths, [ad.tensor(a) for a in arrays[:2]], [ad.tensor(a) for a in arrays[2:]])
            return ad.sumsq(ad.sub(forward(probe, x), ad.tensor(target))).item()

        loss = ad.sumsq(ad.sub(forward(m, x), ad.tensor(target)))
        ad.backward(loss)
        flat0 = np.concatenate([p.ravel() for p in m.parameter_arrays()])
        fd = central_diff(mse_at, flat0)
        got = np.concatenate([p.grad.ravel() for p in m.parameters()])
        assert rel_err(got, fd) < 1e-5


class TestCheckpoints:
    def test_bit_exact_round_trip(self, tmp_path, rng):
        m = init_weights([3, 8, 8, 2], seed=7)
        m.assign_parameters([a * rng.standard_normal(a.shape) for a in m.parameter_arrays()])
        path = str(tmp_path / "model.json")
        save_checkpoint(m, path, extra={"note": "test"})
        loaded, extra = load_checkpoint(path)
        assert extra == {"note": "test"}
        assert loaded.widths == m.widths and loaded.seed == m.seed
        for pa, pb in zip(m.parameters(), loaded.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_rejects_foreign_file(self, tmp_path):
        p = tmp_path / "bogus.json"
        p.write_text("{}")
        with pytest.raises(ContractError):
            load_checkpoint(str(p))
