import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from afnet_amc import core
from afnet_amc.selftest import layer_gradient_errors


def col(values):
    """A (1, W, 1) map from a 1-D list."""
    return np.asarray(values, dtype=np.float64).reshape(1, -1, 1)


@pytest.fixture
def f64():
    with core.precision("float64"):
        yield


class TestConv2d:
    def test_box_filter_on_ones(self, f64):
        k = np.ones((1, 3, 1, 1))
        out = core.conv2d(col([1, 1, 1, 1]), k)
        np.testing.assert_array_equal(out.ravel(), [2, 3, 3, 2])

    def test_dilated_center(self, f64):
        k = np.ones((1, 3, 1, 1))
        out = core.conv2d(col([1, 0, 0, 0, 1]), k, dilation=(1, 2))
        assert out.shape == (1, 5, 1)
        # taps at -2, 0, +2 around the center pick up both ends
        assert out[0, 2, 0] == 2
        np.testing.assert_array_equal(out.ravel(), [1, 0, 2, 0, 1])

    def test_stem_shape(self):
        x = np.random.default_rng(0).normal(size=(2, 5, 1))
        k = np.random.default_rng(1).normal(size=(2, 5, 1, 48))
        out = core.conv2d(x, k, padding=("valid", "same"))
        assert out.shape == (1, 5, 48)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 1, 8, 4)).astype(np.float32)
        k = rng.normal(size=(1, 3, 2, 4)).astype(np.float32)
        batch = core.conv2d(x, k, groups=2)
        for i in range(3):
            np.testing.assert_allclose(batch[i], core.conv2d(x[i], k, groups=2), rtol=1e-6)

    @pytest.mark.parametrize("groups", [1, 2, 4])
    def test_grouped_equals_independent_convs(self, f64, groups):
        rng = np.random.default_rng(groups)
        c_in, c_out = 8, 8
        x = rng.normal(size=(2, 1, 10, c_in))
        k = rng.normal(size=(1, 3, c_in // groups, c_out))
        out = core.conv2d(x, k, groups=groups, dilation=(1, 2))
        gi, go = c_in // groups, c_out // groups
        parts = [
            core.conv2d(x[..., g * gi : (g + 1) * gi], k[..., g * go : (g + 1) * go], dilation=(1, 2))
            for g in range(groups)
        ]
        np.testing.assert_allclose(out, np.concatenate(parts, axis=-1), rtol=1e-12, atol=1e-12)

    def test_grouped_equals_block_diagonal_dense_kernel(self, f64):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 7, 4))
        k = rng.normal(size=(1, 3, 2, 4))
        full = np.zeros((1, 3, 4, 4))
        full[:, :, :2, :2] = k[:, :, :, :2]
        full[:, :, 2:, 2:] = k[:, :, :, 2:]
        np.testing.assert_allclose(core.conv2d(x, k, groups=2), core.conv2d(x, full), rtol=1e-12)

    @pytest.mark.parametrize(
        "x_shape, k_shape, groups",
        [
            ((1, 8, 3), (1, 3, 1, 4), 2),  # groups does not divide C_in
            ((1, 8, 4), (1, 3, 4, 4), 2),  # wrong C_in/groups
            ((1, 8, 4), (3, 4), 1),  # kernel rank
        ],
    )
    def test_rejects_bad_shapes(self, x_shape, k_shape, groups):
        with pytest.raises(core.ShapeError):
            core.conv2d(np.zeros(x_shape), np.zeros(k_shape), groups=groups)

    def test_deterministic(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 1, 16, 8)).astype(np.float32)
        k = rng.normal(size=(1, 3, 4, 8)).astype(np.float32)
        a = core.conv2d(x, k, groups=2)
        b = core.conv2d(x.copy(), k.copy(), groups=2)
        assert a.tobytes() == b.tobytes()


class TestMaxPool:
    def test_values(self):
        np.testing.assert_array_equal(core.maxpool2d(col([1, 3, 2, 4])).ravel(), [3, 4])

    def test_tie_routes_to_first(self):
        out, cache = core.maxpool2d_forward(col([5, 5]))
        assert out.ravel().tolist() == [5]
        np.testing.assert_array_equal(core.maxpool2d_backward(np.ones((1, 1, 1)), cache).ravel(), [1, 0])

    def test_tie_rule_matches_perturbed_finite_difference(self, f64):
        # nudging index 0 up keeps it the max, so the numeric slope there is 1
        x = col([5.0 + 1e-9, 5.0])
        fn = lambda p: (float(core.maxpool2d(p["x"]).sum()), {"x": core.maxpool2d_backward(np.ones((1, 1, 1)), core.maxpool2d_forward(p["x"])[1])})  # noqa: E731
        assert core.finite_diff_check(fn, {"x": x}, eps=1e-10) < 1e-4

    def test_width_halves(self):
        assert core.maxpool2d(np.zeros((1, 128, 48))).shape == (1, 64, 48)

    def test_odd_width_rejected(self):
        with pytest.raises(core.ShapeError, match="divisible by 4"):
            core.maxpool2d(np.zeros((1, 7, 2)))


class TestGlobalAvgPool:
    def test_pair(self):
        np.testing.assert_array_equal(core.global_avg_pool(col([2, 4])), [3])

    @given(st.floats(-1e3, 1e3), st.integers(1, 4), st.integers(1, 6), st.integers(1, 5))
    def test_constant_map(self, v, h, w, c):
        out = core.global_avg_pool(np.full((h, w, c), v))
        np.testing.assert_allclose(out, np.full(c, v), rtol=1e-12, atol=1e-12)

    def test_two_channels(self):
        x = np.stack([[1, 2, 3, 4], [0, 0, 0, 8]], axis=-1).reshape(1, 4, 2).astype(float)
        np.testing.assert_allclose(core.global_avg_pool(x), [2.5, 2.0])


class TestDense:
    def test_identity(self):
        x = np.array([[0.5, -2.0, 3.0]])
        np.testing.assert_array_equal(core.dense(x, np.eye(3), np.zeros(3)), x)

    def test_scaled_identity_without_bias(self):
        np.testing.assert_array_equal(core.dense(np.array([1.0, 2.0]), 3 * np.eye(2)), [3, 6])

    def test_head_shape(self):
        rng = np.random.default_rng(0)
        assert core.dense(rng.normal(size=48), rng.normal(size=(48, 11)), np.zeros(11)).shape == (11,)

    def test_rejects_mismatch(self):
        with pytest.raises(core.ShapeError):
            core.dense(np.zeros(4), np.zeros((3, 2)))
        with pytest.raises(core.ShapeError):
            core.dense(np.zeros(3), np.zeros((3, 2)), np.zeros(3))


class TestReluSoftmax:
    def test_relu(self):
        out, x = core.relu_forward(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0, 0, 2])
        np.testing.assert_array_equal(core.relu_backward(np.ones(3), x), [0, 0, 1])

    def test_relu_all_negative(self):
        assert not core.relu(-np.arange(1, 6, dtype=float)).any()

    @pytest.mark.parametrize(
        "logits, want",
        [([0, 0], [0.5, 0.5]), ([1000, 1000], [0.5, 0.5]), ([0.0, np.log(3)], [0.25, 0.75])],
    )
    def test_softmax_examples(self, logits, want):
        np.testing.assert_allclose(core.softmax(np.array(logits, dtype=float)), want, rtol=1e-12)

    @settings(max_examples=200)
    @given(arrays(np.float64, st.integers(2, 16), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_softmax_sums_to_one_and_shift_invariant(self, z, t):
        p = core.softmax(z)
        assert abs(p.sum() - 1) < 1e-12
        np.testing.assert_allclose(core.softmax(z + t), p, atol=1e-9)


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"w": np.array([1.0, -2.0])}
        state = core.adam_init(params)
        new, state2 = core.adam_step(params, {"w": np.zeros(2)}, state, 1e-3)
        np.testing.assert_array_equal(new["w"], params["w"])
        assert state2.step == state.step + 1

    def test_first_step_size(self):
        params = {"w": np.array([0.0])}
        new, _ = core.adam_step(params, {"w": np.array([1.0])}, core.adam_init(params), 1e-3)
        # bias-corrected m/sqrt(v) = 1, so the step is lr / (1 + eps)
        assert new["w"][0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_identical_blocks_identical_updates(self):
        rng = np.random.default_rng(0)
        w, g = rng.normal(size=5), rng.normal(size=5)
        params = {"a": w.copy(), "b": w.copy()}
        state = core.adam_init(params)
        for _ in range(3):
            params, state = core.adam_step(params, {"a": g, "b": g}, state, 1e-2)
        assert params["a"].tobytes() == params["b"].tobytes()

    def test_state_mirrors_shapes_and_counts_steps(self):
        params = {"k": np.zeros((2, 3)), "b": np.zeros(3)}
        state = core.adam_init(params)
        for i in range(1, 4):
            params, state = core.adam_step(params, {"k": np.ones((2, 3)), "b": np.ones(3)}, state, 1e-3)
            assert state.step == i
        assert {k: v.shape for k, v in state.m.items()} == {k: v.shape for k, v in params.items()}
        assert {k: v.shape for k, v in state.v.items()} == {k: v.shape for k, v in params.items()}

    def test_non_finite_gradient_names_block(self):
        params = {"conv1.w": np.zeros(2), "head.b": np.zeros(2)}
        with pytest.raises(FloatingPointError, match="head.b"):
            core.adam_step(params, {"conv1.w": np.zeros(2), "head.b": np.array([0.0, np.nan])}, core.adam_init(params), 1e-3)


class TestPrecision:
    def test_context_restores_dtype(self):
        before = core.get_dtype()
        with core.precision("float64"):
            assert core.get_dtype() == np.float64
        assert core.get_dtype() == before

    def test_rejects_half(self):
        with pytest.raises(ValueError):
            core.set_dtype(np.float16)


class TestFiniteDifferences:
    def test_dense_gradient(self, f64):
        rng = np.random.default_rng(3)

        def fn(p):
            out, cache = core.dense_forward(p["x"], p["w"])
            dx, dw, _ = core.dense_backward(np.ones_like(out), cache)
            return float(out.sum()), {"x": dx, "w": dw}

        assert core.finite_diff_check(fn, {"x": rng.uniform(-1, 1, (2, 3)), "w": rng.uniform(-1, 1, (3, 4))}) < 1e-6

    def test_relu_away_from_zero(self, f64):
        x = np.array([-0.7, -0.2, 0.3, 0.9])

        def fn(p):
            out, cache = core.relu_forward(p["x"])
            return float((out**2).sum()), {"x": core.relu_backward(2 * out, cache)}

        assert core.finite_diff_check(fn, {"x": x}) < 1e-6

    def test_detects_wrong_gradient(self, f64):
        fn = lambda p: (float((p["x"] ** 2).sum()), {"x": p["x"]})  # noqa: E731
        assert core.finite_diff_check(fn, {"x": np.array([0.5, -0.5])}) > 0.4

    def test_every_layer_below_tolerance(self):
        errs = layer_gradient_errors()
        assert set(errs) >= {"conv2d", "conv2d_stem", "maxpool2d", "global_avg_pool", "dense", "relu", "softmax_ce"}
        assert max(errs.values()) < 1e-4, errs

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.sampled_from([(1, 1), (1, 2)]), st.sampled_from([1, 2]))
    def test_conv_gradient_random(self, seed, dilation, groups):
        rng = np.random.default_rng(seed)
        with core.precision("float64"):
            x = rng.uniform(-1, 1, (2, 1, 6, 4))
            k = rng.uniform(-1, 1, (1, 3, 4 // groups, 4))
            r = rng.uniform(-1, 1, (2, 1, 6, 4))

            def fn(p):
                out, cache = core.conv2d_forward(p["x"], p["k"], groups, dilation)
                dx, dk = core.conv2d_backward(r, cache)
                return float(np.sum(out * r)), {"x": dx, "k": dk}

            assert core.finite_diff_check(fn, {"x": x, "k": k}) < 1e-4
