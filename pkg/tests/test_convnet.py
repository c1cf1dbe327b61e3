import numpy as np
import pytest

from core.convnet import (CHECKPOINT_MAGIC, PARAM_NAMES, ConvRegressor, conv_forward, load_checkpoint,
                          pool_backward, pool_forward, save_checkpoint)
from core.errors import DomainError, NumericError


def naive_conv(x, W, b):
    """Nested-loop 3x3 'same' cross-correlation, NCHW."""
    N, C, H, Wd = x.shape
    O = W.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((N, O, H, Wd))
    for n in range(N):
        for o in range(O):
            for i in range(H):
                for j in range(Wd):
                    out[n, o, i, j] = np.sum(xp[n, :, i:i + 3, j:j + 3] * W[o]) + b[o]
    return out


def micro_model(seed):
    return ConvRegressor.initialize(channels=(2, 3, 4), d_embed=5, input_size=8, seed=seed,
                                    dtype=np.float64, head_bias=np.log(8.0))


def mean_nll(model, x, y):
    z = model.forward(x, keep_cache=False).logit
    return float(np.mean(np.exp(z) - y * z))


class TestPrimitives:
    def test_conv_matches_nested_loops(self, rng):
        x = rng.normal(size=(2, 3, 6, 5))
        W = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out, _ = conv_forward(x, W, b)
        np.testing.assert_allclose(out, naive_conv(x, W, b), rtol=1e-12, atol=1e-12)

    def test_pool_takes_block_maximum(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out, idx = pool_forward(x)
        np.testing.assert_array_equal(out[0, 0], [[5, 7], [13, 15]])
        d = pool_backward(np.ones_like(out), idx, x.shape)
        assert d.sum() == 4 and d[0, 0, 1, 1] == 1 and d[0, 0, 0, 0] == 0

    def test_pool_drops_odd_edge(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        out, idx = pool_forward(x)
        assert out.shape == (1, 2, 2, 2)
        assert pool_backward(out, idx, x.shape).shape == x.shape


class TestGradients:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_every_parameter_matches_finite_differences(self, seed):
        data = np.random.default_rng(100 + seed)
        model = micro_model(seed)
        x = data.uniform(0, 1, size=(3, 8, 8, 3))
        y = data.uniform(4, 12, size=3)
        grads = model.backward(model.forward(x), y)
        eps = 1e-6
        for name in PARAM_NAMES:
            p = model.params[name]
            numeric = np.zeros_like(p)
            for i in np.ndindex(p.shape):
                old = p[i]
                p[i] = old + eps
                up = mean_nll(model, x, y)
                p[i] = old - eps
                down = mean_nll(model, x, y)
                p[i] = old
                numeric[i] = (up - down) / (2 * eps)
            denom = max(np.linalg.norm(grads[name]) + np.linalg.norm(numeric), 1e-10)
            assert np.linalg.norm(grads[name] - numeric) / denom < 1e-4, name

    def test_head_bias_gradient_is_mean_residual(self, rng):
        model = micro_model(0)
        x = rng.uniform(0, 1, size=(4, 8, 8, 3))
        y = np.array([5.0, 6.0, 7.0, 8.0])
        fp = model.forward(x)
        grads = model.backward(fp, y)
        assert grads["head.b"][0] == pytest.approx(np.mean(fp.rate - y), rel=1e-12)

    def test_backward_needs_cache(self, rng):
        model = micro_model(0)
        fp = model.forward(rng.uniform(size=(1, 8, 8, 3)), keep_cache=False)
        with pytest.raises(DomainError):
            model.backward(fp, [1.0])


class TestForward:
    def test_rate_positive_and_embedding_nonnegative(self, rng):
        model = ConvRegressor.initialize(seed=3, head_bias=np.log(9.0))
        fp = model.forward(rng.uniform(size=(2, 64, 64, 3)).astype(np.float32), keep_cache=False)
        assert fp.rate.shape == (2,) and (fp.rate > 0).all()
        assert fp.embedding.shape == (2, 64) and (fp.embedding >= 0).all()
        np.testing.assert_allclose(np.log(fp.rate), fp.logit, rtol=1e-5)

    def test_head_bias_sets_initial_rate(self, rng):
        model = micro_model(1)
        rate = model.forward(rng.uniform(size=(5, 8, 8, 3)), keep_cache=False).rate
        np.testing.assert_allclose(rate, 8.0, rtol=0.5)

    def test_non_finite_input_names_layer(self, rng):
        model = micro_model(0)
        x = rng.uniform(size=(1, 8, 8, 3))
        x[0, 2, 2, 1] = np.nan
        with pytest.raises(NumericError) as exc:
            model.forward(x)
        assert exc.value.layer == 0

    def test_overflowing_rate(self, rng):
        model = micro_model(0)
        model.params["head.b"][:] = 1e6
        with pytest.raises(NumericError) as exc:
            model.forward(rng.uniform(size=(1, 8, 8, 3)))
        assert exc.value.layer == 12

    def test_underflowing_rate_stays_positive(self, rng):
        model = micro_model(0)
        model.params["head.b"][:] = -1e4
        rate = model.forward(rng.uniform(size=(3, 8, 8, 3)), keep_cache=False).rate
        assert np.isfinite(rate).all() and (rate > 0).all()
        assert (rate == np.finfo(np.float64).tiny).all()

    def test_wrong_layout(self):
        with pytest.raises(DomainError):
            micro_model(0).forward(np.zeros((1, 3, 8, 8)))

    def test_seeded_initialisation(self):
        a, b = ConvRegressor.initialize(seed=9), ConvRegressor.initialize(seed=9)
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(a.params[k], b.params[k])
        assert not np.array_equal(a.params["conv1.W"], ConvRegressor.initialize(seed=10).params["conv1.W"])


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = ConvRegressor.initialize(channels=(4, 8, 8), d_embed=16, input_size=32, seed=5, head_bias=2.0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert path.read_bytes()[:4] == CHECKPOINT_MAGIC
        assert (loaded.channels, loaded.d_embed, loaded.input_size) == ((4, 8, 8), 16, 32)
        for k in PARAM_NAMES:
            np.testing.assert_array_equal(loaded.params[k], model.params[k])

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"PK\x03\x04 not a model")
        with pytest.raises(DomainError):
            load_checkpoint(path)

    def test_rejects_trailing_bytes(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(micro_model(0), path)
        path.write_bytes(path.read_bytes() + b"\x00\x00\x00\x00")
        with pytest.raises(DomainError, match="trailing"):
            load_checkpoint(path)

    @pytest.mark.parametrize("keep", [2, 10, 40, -4])
    def test_rejects_truncated_file(self, tmp_path, keep):
        path = tmp_path / "short.ckpt"
        save_checkpoint(micro_model(0), path)
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(DomainError, match="short.ckpt"):
            load_checkpoint(path)
