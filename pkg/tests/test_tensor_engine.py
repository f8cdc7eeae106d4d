import numpy as np
import pytest

from vesselseg.engine import (
    AdamWState,
    OptimizerError,
    Tensor,
    adamw_step,
    add,
    backward,
    batchnorm2d,
    clip_grad_global_norm,
    conv2d,
    conv2d_reference,
    gradient_check,
    log,
    mul,
    pool2d,
    relu,
    sigmoid,
    softmax1d,
    spread_values,
    sum_per_sample,
    tensor,
    tmean,
    tsum,
    upsample_bilinear,
)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
        backward(tsum(x))
        assert np.array_equal(x.grad, np.ones((2, 2), dtype=np.float32))

    def test_sum_of_squares_gradient(self):
        x = tensor([1.0, -2.0, 3.0], requires_grad=True, dtype=np.float64)
        backward(tsum(mul(x, x)))
        assert np.allclose(x.grad, 2 * x.data)

    def test_reuse_accumulates(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        backward(tsum(add(x, x)))
        assert np.array_equal(x.grad, [2.0, 2.0])

    def test_k_uses_accumulate_k_times(self):
        x = tensor([1.5], requires_grad=True, dtype=np.float64)
        acc = x
        for _ in range(4):
            acc = add(acc, x)
        backward(tsum(acc))
        assert x.grad[0] == 5.0

    def test_non_scalar_loss_rejected(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            backward(add(x, x))

    def test_untouched_leaf_has_no_grad(self):
        x = tensor([1.0], requires_grad=True)
        y = tensor([2.0], requires_grad=True)
        backward(tsum(mul(x, x)))
        assert y.grad is None


class TestElementwise:
    def test_softmax_symmetry(self):
        s = softmax1d(tensor([0.0, 0.0, 0.0, 0.0], dtype=np.float64))
        assert np.allclose(s.data, 0.25)

    def test_softmax_log_identity_on_simplex(self):
        point = np.array([0.40, 0.25, 0.20, 0.15])
        s = softmax1d(tensor(np.log(point), dtype=np.float64))
        assert np.allclose(s.data, point, atol=1e-12)

    def test_softmax_sums_to_one_and_positive(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            s = softmax1d(tensor(rng.normal(0, 5, 7), dtype=np.float64))
            assert abs(s.data.sum() - 1.0) < 1e-9
            assert (s.data > 0).all()

    def test_sigmoid_at_zero(self):
        assert sigmoid(tensor([0.0])).data[0] == 0.5

    def test_sigmoid_saturation_is_finite(self):
        out = sigmoid(tensor([-1e4, 1e4], dtype=np.float64))
        assert np.all(np.isfinite(out.data))
        assert out.data[0] == 0.0 and out.data[1] == 1.0

    def test_log_clamps_small_inputs(self):
        out = log(tensor([0.0, 1e-20, 1.0], dtype=np.float64))
        assert np.isfinite(out.data).all()
        assert out.data[0] == np.log(1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            add(tensor([1.0]), tensor([1.0, 2.0]))

    def test_forward_stays_finite_on_finite_inputs(self):
        rng = np.random.default_rng(0)
        x = tensor(rng.normal(0, 50, (4, 4)), dtype=np.float64)
        for out in (relu(x), sigmoid(x), log(x), mul(x, x), tmean(x)):
            assert np.all(np.isfinite(out.data))


class TestConv2d:
    def test_matches_nested_loop_oracle_exactly_on_integer_grids(self):
        # integer-valued inputs make every partial sum exact, so any correct
        # implementation must agree with the reference bit for bit
        rng = np.random.default_rng(0)
        for n, c, h, w in [(1, 1, 3, 3), (2, 3, 7, 7), (1, 2, 5, 6), (2, 1, 4, 4)]:
            for padding, stride in [(0, 1), (1, 1), (1, 2)]:
                x = rng.integers(-4, 5, (n, c, h, w)).astype(np.float64)
                k = rng.integers(-4, 5, (2, c, 3, 3)).astype(np.float64)
                b = rng.integers(-4, 5, 2).astype(np.float64)
                if (h + 2 * padding - 3) % stride or (w + 2 * padding - 3) % stride:
                    continue
                ref = conv2d_reference(x, k, b, padding, stride)
                got = conv2d(Tensor(x), Tensor(k), Tensor(b), padding, stride)
                assert np.array_equal(got.data, ref)

    def test_matches_oracle_on_floats(self):
        rng = np.random.default_rng(1)
        x = rng.random((2, 3, 7, 7))
        k = rng.random((4, 3, 3, 3))
        b = rng.random(4)
        ref = conv2d_reference(x, k, b, 1, 1)
        got = conv2d(Tensor(x), Tensor(k), Tensor(b), 1, 1)
        assert np.allclose(got.data, ref, rtol=0, atol=1e-12)

    def test_all_ones_center_and_corner(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        k = Tensor(np.ones((1, 1, 3, 3)))
        b = Tensor(np.zeros(1))
        out = conv2d(x, k, b, padding=1).data[0, 0]
        assert out[1, 1] == 9.0
        assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0

    def test_dirac_kernel_is_identity(self):
        rng = np.random.default_rng(2)
        x = rng.random((2, 3, 6, 5))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = conv2d(Tensor(x), Tensor(k), Tensor(np.zeros(3)), padding=1)
        assert np.array_equal(out.data, x)

    def test_zero_kernel_zero_bias(self):
        rng = np.random.default_rng(3)
        out = conv2d(Tensor(rng.random((1, 2, 4, 4))),
                     Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3)), padding=1)
        assert np.count_nonzero(out.data) == 0

    def test_shape_errors(self):
        x = Tensor(np.ones((1, 2, 4, 4)))
        with pytest.raises(ValueError, match="channels"):
            conv2d(x, Tensor(np.ones((1, 3, 3, 3))), Tensor(np.zeros(1)))
        with pytest.raises(ValueError, match="odd"):
            conv2d(x, Tensor(np.ones((1, 2, 2, 2))), Tensor(np.zeros(1)))
        with pytest.raises(ValueError, match="integral"):
            conv2d(x, Tensor(np.ones((1, 2, 3, 3))), Tensor(np.zeros(1)),
                   padding=0, stride=3)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        k0 = rng.random((2, 3, 3, 3))
        b0 = rng.random(2)

        def f_input(t):
            out = conv2d(t, Tensor(k0), Tensor(b0), padding=1, stride=1)
            return tsum(mul(out, out))

        assert gradient_check(f_input, rng.random((2, 3, 5, 5))) < 1e-6

        x0 = rng.random((1, 3, 5, 5))

        def f_kernel(t):
            out = conv2d(Tensor(x0), t, Tensor(b0), padding=1)
            return tsum(mul(out, out))

        assert gradient_check(f_kernel, k0) < 1e-6

        def f_bias(t):
            out = conv2d(Tensor(x0), Tensor(k0), t, padding=1)
            return tsum(mul(out, out))

        assert gradient_check(f_bias, b0) < 1e-6

    def test_strided_gradients(self):
        rng = np.random.default_rng(5)
        k0 = rng.random((2, 2, 3, 3))
        b0 = rng.random(2)

        def f_input(t):
            out = conv2d(t, Tensor(k0), Tensor(b0), padding=1, stride=2)
            return tsum(mul(out, out))

        assert gradient_check(f_input, rng.random((2, 2, 7, 7))) < 1e-6

        x0 = rng.random((1, 2, 7, 7))

        def f_kernel(t):
            out = conv2d(Tensor(x0), t, Tensor(b0), padding=1, stride=2)
            return tsum(mul(out, out))

        assert gradient_check(f_kernel, k0) < 1e-6


class TestPool2d:
    def test_window_scan_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.random((2, 2, 6, 6))
        out = pool2d(Tensor(x), "max", 2).data
        # independent window scan
        for n in range(2):
            for c in range(2):
                for i in range(3):
                    for j in range(3):
                        expect = x[n, c, 2 * i:2 * i + 2, 2 * j:2 * j + 2].max()
                        assert out[n, c, i, j] == expect

    def test_hand_case(self):
        out = pool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), "max", 2)
        assert out.data.reshape(-1).tolist() == [4.0]

    def test_min_replicate_on_ones(self):
        out = pool2d(Tensor(np.ones((1, 1, 5, 5))), "min", 3, stride=1,
                     replicate_pad=True)
        assert np.array_equal(out.data, np.ones((1, 1, 5, 5)))

    def test_k1_max_then_min_is_identity(self):
        rng = np.random.default_rng(6)
        x = rng.random((1, 2, 4, 4))
        out = pool2d(pool2d(Tensor(x), "max", 1), "min", 1)
        assert np.array_equal(out.data, x)

    def test_tie_routes_to_first_row_major(self):
        x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
        out = pool2d(x, "max", 2)
        backward(tsum(out))
        grad = x.grad[0, 0]
        assert grad[0, 0] == 1.0 and grad.sum() == 1.0

    def test_rejections(self):
        with pytest.raises(ValueError, match="positive"):
            pool2d(Tensor(np.ones((1, 1, 4, 4))), "max", 0)
        with pytest.raises(ValueError, match="divisible"):
            pool2d(Tensor(np.ones((1, 1, 5, 5))), "max", 2)
        with pytest.raises(ValueError, match="mode"):
            pool2d(Tensor(np.ones((1, 1, 4, 4))), "median", 2)

    def test_gradients_away_from_ties(self):
        rng = np.random.default_rng(7)

        def f_max(t):
            out = pool2d(t, "max", 2)
            return tsum(mul(out, out))

        assert gradient_check(f_max, spread_values(rng, (1, 2, 6, 6))) < 1e-6

        def f_min_replicate(t):
            out = pool2d(t, "min", 3, stride=1, replicate_pad=True)
            return tsum(mul(out, out))

        assert gradient_check(f_min_replicate, spread_values(rng, (1, 1, 6, 6))) < 1e-6


class TestUpsampleBilinear:
    def test_constant_preserved_exactly(self):
        c = np.float32(0.3712)
        out = upsample_bilinear(Tensor(np.full((1, 2, 3, 3), c)), 7, 5)
        assert np.all(out.data == c)

    def test_hand_case_1x2_to_1x4(self):
        out = upsample_bilinear(Tensor(np.array([[[[0.0, 1.0]]]])), 1, 4)
        assert np.allclose(out.data.ravel(), [0.0, 0.25, 0.75, 1.0], atol=1e-15)

    def test_same_size_is_identity(self):
        rng = np.random.default_rng(8)
        x = rng.random((1, 3, 4, 6))
        out = upsample_bilinear(Tensor(x), 4, 6)
        assert np.array_equal(out.data, x)

    def test_rejects_bad_target(self):
        with pytest.raises(ValueError, match=">= 1"):
            upsample_bilinear(Tensor(np.ones((1, 1, 2, 2))), 0, 4)

    def test_gradient(self):
        rng = np.random.default_rng(9)

        def f(t):
            out = upsample_bilinear(t, 7, 9)
            return tsum(mul(out, out))

        assert gradient_check(f, rng.random((1, 2, 3, 4))) < 1e-6

        def f_down(t):
            out = upsample_bilinear(t, 3, 2)
            return tsum(mul(out, out))

        assert gradient_check(f_down, rng.random((1, 2, 6, 5))) < 1e-6


class TestBatchNorm2d:
    def test_train_mode_normalizes(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.standard_normal((4, 3, 8, 8)))
        out = batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                          np.zeros(3), np.ones(3), training=True)
        assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-6
        assert np.abs(out.data.var(axis=(0, 2, 3)) - 1.0).max() < 1e-4

    def test_constant_channel_maps_to_zero(self):
        x = Tensor(np.full((2, 2, 4, 4), 3.7))
        out = batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                          np.zeros(2), np.ones(2), training=True)
        assert np.all(np.isfinite(out.data))
        assert np.abs(out.data).max() < 1e-5

    def test_eval_mode_is_affine(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 4, 4))
        gamma = np.array([1.5, 0.5, 2.0])
        beta = np.array([0.1, -0.2, 0.0])
        out = batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta),
                          np.zeros(3), np.ones(3), training=False, eps=0.0)
        expect = gamma.reshape(1, 3, 1, 1) * x + beta.reshape(1, 3, 1, 1)
        assert np.allclose(out.data, expect, atol=1e-12)

    def test_running_stats_update(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((4, 2, 6, 6))
        rm, rv = np.zeros(2), np.ones(2)
        batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                    rm, rv, training=True, momentum=0.1)
        m = 4 * 6 * 6
        expect_rm = 0.1 * x.mean(axis=(0, 2, 3))
        expect_rv = 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1)
        assert np.allclose(rm, expect_rm, atol=1e-7)
        assert np.allclose(rv, expect_rv, atol=1e-6)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channels"):
            batchnorm2d(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones(2)),
                        Tensor(np.zeros(2)), np.zeros(2), np.ones(2), training=True)

    def test_gradient_through_batch_statistics(self):
        rng = np.random.default_rng(13)

        def f(t):
            g = Tensor(np.array([1.3, 0.7]), requires_grad=True)
            b = Tensor(np.array([0.2, -0.1]), requires_grad=True)
            out = batchnorm2d(t, g, b, np.zeros(2), np.ones(2), training=True)
            return tsum(mul(out, out))

        assert gradient_check(f, rng.standard_normal((2, 2, 4, 4))) < 1e-6


class TestGradientCheckHarness:
    def test_polynomial_is_near_exact(self):
        rng = np.random.default_rng(14)

        def f(t):
            return tsum(mul(t, t))

        assert gradient_check(f, rng.random((4, 4))) < 1e-8

    def test_reports_wrong_gradients(self):
        # a deliberately broken backward must produce a large error
        def f(t):
            out = Tensor(t.data * 3.0, _parents=(t,))

            def bwd():
                t._accumulate(out.grad)  # claims slope 1 instead of 3

            out._backward = bwd
            return tsum(out)

        assert gradient_check(f, np.array([1.0, 2.0])) > 0.5

    def test_sum_per_sample(self):
        rng = np.random.default_rng(15)

        def f(t):
            s = sum_per_sample(t)
            return tsum(mul(s, s))

        assert gradient_check(f, rng.random((3, 2, 4, 4))) < 1e-8


class TestAdamW:
    def test_first_step_hand_trace(self):
        # independent re-derivation of one update with beta defaults:
        # m_hat = 1, v_hat = 1 after bias correction on the first step
        params = {"w": tensor([1.0], requires_grad=True, dtype=np.float64)}
        state = AdamWState(params, lr=1e-3, weight_decay=1e-4)
        adamw_step(state, params, {"w": np.array([1.0])})
        expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 1e-4 * 1.0
        assert abs(params["w"].data[0] - expected) < 1e-12

    def test_zero_grad_zero_decay_is_identity(self):
        params = {"w": tensor([0.7, -0.3], requires_grad=True, dtype=np.float64)}
        state = AdamWState(params, lr=1e-3, weight_decay=0.0)
        before = params["w"].data.copy()
        for _ in range(3):
            adamw_step(state, params, {"w": np.zeros(2)})
        assert np.array_equal(params["w"].data, before)

    def test_identical_state_identical_update(self):
        def run():
            params = {"w": tensor([0.5], requires_grad=True, dtype=np.float64)}
            state = AdamWState(params, lr=1e-2, weight_decay=1e-4)
            for i in range(5):
                adamw_step(state, params, {"w": np.array([0.1 * (i + 1)])})
            return params["w"].data.copy()

        assert np.array_equal(run(), run())

    def test_lr_zero_freezes_parameters(self):
        params = {"w": tensor([1.25], requires_grad=True, dtype=np.float64)}
        state = AdamWState(params, lr=1e-3, weight_decay=1e-4)
        for _ in range(4):
            adamw_step(state, params, {"w": np.array([0.3])}, lr=0.0)
        assert params["w"].data[0] == 1.25
        assert state.t == 4

    def test_nan_grad_rejected_without_state_change(self):
        params = {"a": tensor([1.0], requires_grad=True, dtype=np.float64),
                  "b": tensor([2.0], requires_grad=True, dtype=np.float64)}
        state = AdamWState(params, lr=1e-3)
        adamw_step(state, params, {"a": np.array([0.1]), "b": np.array([0.1])})
        snapshot = (params["a"].data.copy(), params["b"].data.copy(),
                    state.m["a"].copy(), state.t)
        with pytest.raises(OptimizerError, match="non-finite"):
            adamw_step(state, params, {"a": np.array([np.nan]), "b": np.array([0.1])})
        assert np.array_equal(params["a"].data, snapshot[0])
        assert np.array_equal(params["b"].data, snapshot[1])
        assert np.array_equal(state.m["a"], snapshot[2])
        assert state.t == snapshot[3]


class TestClipGradGlobalNorm:
    def test_hand_case(self):
        grads, norm = clip_grad_global_norm({"g": np.array([3.0, 4.0])}, 1.0)
        assert norm == 5.0
        assert np.allclose(grads["g"], [0.6, 0.8], atol=1e-15)

    def test_below_threshold_unchanged(self):
        g = np.array([0.3, 0.4])
        grads, norm = clip_grad_global_norm({"g": g}, 1.0)
        assert norm == 0.5
        assert grads["g"] is g

    def test_zero_grads_unchanged(self):
        grads, norm = clip_grad_global_norm({"g": np.zeros(3)}, 1.0)
        assert norm == 0.0
        assert np.array_equal(grads["g"], np.zeros(3))

    def test_post_clip_norm_bound(self):
        rng = np.random.default_rng(16)
        for _ in range(20):
            grads = {f"p{i}": rng.normal(0, 10, rng.integers(1, 50)).astype(np.float32)
                     for i in range(4)}
            clipped, _ = clip_grad_global_norm(grads, 1.0)
            total = sum(float(np.sum(np.asarray(g, np.float64) ** 2))
                        for g in clipped.values())
            assert np.sqrt(total) <= 1.0 + 1e-9

    def test_rejects_bad_max_norm(self):
        with pytest.raises(ValueError):
            clip_grad_global_norm({"g": np.ones(2)}, 0.0)
