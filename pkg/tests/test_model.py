import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from afnet_amc import core
from afnet_amc import model as M
from afnet_amc.selftest import TINY, af_unit_gradient_error, afnet_gradient_error, fusion_gradient_error

finite = st.floats(-30, 30, allow_nan=False)


@pytest.fixture(scope="module")
def default_params():
    return M.init_params(M.ModelConfig(), seed=0, head_init="he")


def random_fusion(rng, c=8, d=2):
    return rng.normal(size=(c, d)), rng.normal(size=(d, c)), rng.normal(size=(d, c))


class TestLambdaSoftmax:
    def test_equal_logits_lambda_two(self):
        alpha, beta = M.lambda_softmax(np.zeros(5), np.zeros(5), 2.0)
        np.testing.assert_array_equal(alpha, np.ones(5))
        np.testing.assert_array_equal(beta, np.ones(5))

    def test_ln3_gap(self):
        alpha, beta = M.lambda_softmax(np.array([np.log(3)]), np.array([0.0]), 1.0)
        assert alpha[0] == pytest.approx(0.75, abs=1e-15)
        assert beta[0] == pytest.approx(0.25, abs=1e-15)

    def test_no_overflow(self):
        alpha, beta = M.lambda_softmax(np.array([1000.0]), np.array([-1000.0]), 2.0)
        assert alpha[0] == 2.0 and beta[0] == 0.0

    @settings(max_examples=300)
    @given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite), st.sampled_from([1.0, 2.0]), st.floats(-50, 50))
    def test_sum_and_shift(self, a, b, lam, t):
        alpha, beta = M.lambda_softmax(a, b, lam)
        assert np.max(np.abs(alpha + beta - lam)) < 1e-12
        alpha2, _ = M.lambda_softmax(a + t, b + t, lam)
        assert np.max(np.abs(alpha2 - alpha)) < 1e-9


class TestFusion:
    @pytest.mark.parametrize("lam, combine", [(1.0, lambda a, b: (a + b) / 2), (2.0, lambda a, b: a + b)])
    def test_tied_maps_give_fixed_mix(self, lam, combine):
        rng = np.random.default_rng(0)
        A, B = rng.normal(size=(2, 1, 6, 8))
        w1, w2, _ = random_fusion(rng)
        V, _ = M.fusion_forward(A, B, w1, w2, w2, lam)
        np.testing.assert_allclose(V, combine(A, B), rtol=1e-12, atol=1e-12)

    def test_output_in_weighted_span(self):
        rng = np.random.default_rng(1)
        A, B = rng.normal(size=(2, 3, 1, 5, 8))
        V, cache = M.fusion_forward(A, B, *random_fusion(rng), 2.0)
        alpha = cache[5]
        assert np.all((alpha > 0) & (alpha < 2))
        np.testing.assert_allclose(V, alpha[:, None, None, :] * A + (2 - alpha[:, None, None, :]) * B, atol=1e-12)

    def test_unbatched_input(self):
        rng = np.random.default_rng(2)
        A, B = rng.normal(size=(2, 1, 5, 8))
        w = random_fusion(rng)
        V1, _ = M.fusion_forward(A, B, *w, 1.0)
        V2, _ = M.fusion_forward(A[None], B[None], *w, 1.0)
        np.testing.assert_allclose(V1, V2[0], rtol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(core.ShapeError):
            M.fusion_forward(np.zeros((1, 4, 8)), np.zeros((1, 5, 8)), *random_fusion(np.random.default_rng(0)), 1.0)

    @pytest.mark.parametrize("lam", [1.0, 2.0])
    def test_gradient(self, lam):
        assert fusion_gradient_error(lam=lam) < 1e-4

    @pytest.mark.parametrize("c, r, want", [(48, 16, 432), (48, 8, 864), (8, 4, 48)])
    def test_param_count(self, c, r, want):
        assert M.count_fusion_params(c, r) == want
        cfg = M.ModelConfig(channels=c, compression=r, units=1, pool_after=())
        p = M.init_params(cfg, 0)
        assert sum(p[f"unit1.fuse1.{w}"].size for w in ("w1", "w2", "w3")) == want

    def test_param_count_rejects_non_divisor(self):
        with pytest.raises(ValueError):
            M.count_fusion_params(48, 5)


class TestAFUnit:
    def test_shape_preserved(self, default_params):
        X = np.random.default_rng(0).normal(size=(1, 128, 48)).astype(np.float32)
        Y, _ = M.af_unit_forward(X, default_params, "unit1", 2)
        assert Y.shape == X.shape

    @settings(max_examples=10, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 12))
    def test_shape_preserved_any_width(self, batch, width):
        cfg = M.ModelConfig(channels=8, compression=4, units=1, pool_after=(), frame_length=8)
        p = M.init_params(cfg, 0)
        X = np.ones((batch, 1, width, 8), dtype=np.float32)
        assert M.af_unit_forward(X, p, "unit1", 2)[0].shape == X.shape

    def test_zero_in_zero_out(self, default_params):
        Y, _ = M.af_unit_forward(np.zeros((1, 32, 48), dtype=np.float32), default_params, "unit5", 2)
        assert not Y.any()

    def test_gradient(self):
        assert af_unit_gradient_error() < 1e-4

    def test_channel_mismatch(self, default_params):
        with pytest.raises(core.ShapeError):
            M.af_unit_forward(np.zeros((1, 8, 16)), default_params, "unit1", 2)


class TestNetwork:
    def test_widths(self, default_params):
        cfg = M.ModelConfig()
        relus: list = []
        frame = np.random.default_rng(0).normal(size=(2, 128))
        logits, _ = M.logits_forward(default_params, cfg, frame, relus)
        assert relus[0].shape == (1, 1, 128, 48)
        # per unit: small branch, large branch, two fusion squeezes
        branch_widths = [relus[1 + 4 * u].shape[2] for u in range(9)]
        assert branch_widths == [128] * 3 + [64] * 3 + [32] * 3
        assert relus[3].shape == (1, 3)
        assert logits.shape == (1, 11)

    def test_probabilities(self, default_params):
        frames = np.random.default_rng(1).normal(size=(5, 2, 128)).astype(np.float32)
        probs = M.afnet_forward(frames, default_params, M.ModelConfig())
        assert probs.shape == (5, 11) and probs.dtype == np.float32
        np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)
        single = M.afnet_forward(frames[2], default_params, M.ModelConfig())
        assert single.shape == (11,)
        np.testing.assert_allclose(single, probs[2], rtol=1e-5, atol=1e-7)

    def test_pure_function(self, default_params):
        frames = np.random.default_rng(2).normal(size=(3, 2, 128)).astype(np.float32)
        a = M.afnet_forward(frames, default_params, M.ModelConfig())
        b = M.afnet_forward(frames.copy(), default_params, M.ModelConfig())
        assert a.tobytes() == b.tobytes()

    def test_frame_length_mismatch(self, default_params):
        with pytest.raises(core.ShapeError, match="frame length"):
            M.afnet_forward(np.zeros((2, 64)), default_params, M.ModelConfig())

    def test_predict(self, default_params):
        frames = np.random.default_rng(3).normal(size=(4, 2, 128)).astype(np.float32)
        probs = M.afnet_forward(frames, default_params, M.ModelConfig())
        np.testing.assert_array_equal(M.predict(frames, default_params, M.ModelConfig()), probs.argmax(axis=1))

    @pytest.mark.parametrize("weighted", [False, True])
    def test_tiny_network_gradient(self, weighted):
        assert afnet_gradient_error(weighted=weighted) < 1e-4

    def test_loss_independent_of_threads_and_chunks(self):
        rng = np.random.default_rng(4)
        params = M.init_params(TINY, 1, head_init="he")
        x = rng.normal(size=(40, 2, 16)).astype(np.float32)
        y = rng.integers(0, 4, 40)
        l1, g1, _ = M.loss_and_grad(params, TINY, x, y, chunk_size=8, threads=1)
        l2, g2, _ = M.loss_and_grad(params, TINY, x, y, chunk_size=8, threads=4)
        assert l1 == l2
        assert all(g1[k].tobytes() == g2[k].tobytes() for k in g1)

    def test_unit_weights_equal_plain_loss(self):
        rng = np.random.default_rng(5)
        params = M.init_params(TINY, 2, head_init="he")
        x = rng.normal(size=(10, 2, 16)).astype(np.float32)
        y = rng.integers(0, 4, 10)
        l1, g1, _ = M.loss_and_grad(params, TINY, x, y)
        l2, g2, _ = M.loss_and_grad(params, TINY, x, y, weights=np.ones(10))
        assert l1 == l2
        assert all(np.array_equal(g1[k], g2[k]) for k in g1)

    def test_rejects_bad_labels(self):
        params = M.init_params(TINY, 0)
        with pytest.raises(ValueError):
            M.loss_and_grad(params, TINY, np.zeros((2, 2, 16), dtype=np.float32), [0, 4])


class TestConfigAndInit:
    @pytest.mark.parametrize(
        "kwargs",
        [dict(compression=5), dict(groups=5), dict(frame_length=126), dict(pool_after=(6, 3)), dict(units=0)],
    )
    def test_invalid_configs(self, kwargs):
        with pytest.raises(ValueError):
            M.ModelConfig(**kwargs)

    def test_same_seed_same_params(self):
        a, b, c = (M.init_params(TINY, s) for s in (3, 3, 4))
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)
        assert any(a[k].tobytes() != c[k].tobytes() for k in a)

    @pytest.mark.parametrize("head_init", ["zero", "he"])
    def test_he_uniform_bounds(self, head_init):
        params = M.init_params(M.ModelConfig(), 0, head_init=head_init)
        for name, p in params.items():
            if name.endswith(".b"):
                assert not p.any()
            else:
                bound = np.sqrt(6 / M.fan_in(name, p.shape))
                assert np.max(np.abs(p)) <= bound
        assert params["head.w"].any() == (head_init == "he")

    def test_fan_in(self):
        assert M.fan_in("conv1.w", (2, 5, 1, 48)) == 10
        assert M.fan_in("unit1.small", (1, 3, 24, 48)) == 72
        assert M.fan_in("head.w", (48, 11)) == 48

    def test_fusion_has_no_bias(self):
        names = M.param_shapes(M.ModelConfig())
        assert not [n for n in names if ".fuse" in n and n.endswith(".b")]

    def test_total_count(self):
        cfg = M.ModelConfig()
        per_unit = 2 * 3 * 24 * 48 + 2 * 432
        assert M.count_params(M.init_params(cfg, 0)) == 2 * 5 * 48 + 48 + 9 * per_unit + 48 * 11 + 11


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        cfg = M.ModelConfig(num_classes=8, frame_length=64)
        params = M.init_params(cfg, 7, head_init="he")
        path = tmp_path / "m.afn"
        M.save_checkpoint(path, params, cfg)
        back, cfg2 = M.load_checkpoint(path)
        assert cfg2 == cfg
        assert list(back) == list(params)
        assert all(np.array_equal(back[k], params[k]) for k in params)
        assert path.read_bytes() == M.checkpoint_bytes(back, cfg2)

    def test_hash_stable(self):
        params = M.init_params(TINY, 0)
        assert M.checkpoint_hash(params, TINY) == M.checkpoint_hash({k: v.copy() for k, v in params.items()}, TINY)

    @pytest.mark.parametrize(
        "mutate, match",
        [(lambda b: b"XXXX" + b[4:], "magic"), (lambda b: b[:-4], "truncated"), (lambda b: b + b"\0", "trailing")],
    )
    def test_corruption(self, mutate, match):
        blob = M.checkpoint_bytes(M.init_params(TINY, 0), TINY)
        with pytest.raises(M.CheckpointError, match=match):
            M.parse_checkpoint(mutate(blob))

    def test_config_mismatch(self):
        with pytest.raises(M.CheckpointError):
            M.checkpoint_bytes(M.init_params(TINY, 0), M.ModelConfig())
