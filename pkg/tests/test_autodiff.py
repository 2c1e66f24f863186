"""Engine-level tests: op semantics, backward rules, and the finite-difference check."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from somnoflow import autodiff as ad
from somnoflow.autodiff import Tape, Tensor, backward, grad_check
from somnoflow.errors import ContractError, DimensionError

from conftest import naive_conv1d, naive_conv1d_grads


class TestMatmul:
    def test_identity(self):
        m = Tensor([[3.0, -1.0], [0.5, 2.0]])
        eye = Tensor(np.eye(2))
        assert np.array_equal(ad.matmul(eye, m).data, m.data)

    def test_hand_arithmetic(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
        assert out.data.tolist() == [[2.0], [4.0]]

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(20):
            b = Tensor(rng.standard_normal((4, 2)))
            x = Tensor(rng.standard_normal((3, 4)))
            worst = max(worst, grad_check(lambda t: ad.tsum(ad.tanh(ad.matmul(t, b))), x))
            a = Tensor(rng.standard_normal((3, 4)))
            worst = max(worst, grad_check(lambda t: ad.tsum(ad.tanh(ad.matmul(a, t))), b))
        assert worst < 1e-6

    def test_inner_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as exc:
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
        assert "[2, 3]" in str(exc.value) and "[4, 2]" in str(exc.value)


class TestConv1d:
    def test_zero_input_zero_output(self):
        x = Tensor(np.zeros((2, 10)))
        w = Tensor(np.random.default_rng(1).standard_normal((3, 2, 3)))
        out = ad.conv1d(x, w, dilation=1, stride=1, padding=1)
        assert np.array_equal(out.data, np.zeros((3, 10)))

    def test_same_length_contract(self):
        x = Tensor(np.random.default_rng(2).standard_normal((1, 30)))
        w = Tensor(np.random.default_rng(3).standard_normal((4, 1, 3)))
        out = ad.conv1d(x, w, dilation=1, stride=1, padding=1)
        assert out.shape == (4, 30)

    def test_randomized_against_nested_loop_oracle(self):
        rng = np.random.default_rng(7)
        done = 0
        while done < 100:
            c_in, c_out = (int(v) for v in rng.integers(1, 5, 2))
            length = int(rng.integers(2, 33))
            k = int(rng.integers(1, 6))
            dilation = int(rng.integers(1, 5))
            stride = int(rng.integers(1, 6))
            padding = int(rng.integers(0, 4))
            if dilation * (k - 1) + 1 > length + 2 * padding:
                continue
            x = rng.standard_normal((c_in, length))
            w = rng.standard_normal((c_out, c_in, k))
            b = rng.standard_normal(c_out)
            out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), dilation, stride, padding)
            expected = naive_conv1d(x, w, b, dilation, stride, padding)
            assert np.max(np.abs(out.data - expected)) <= 1e-10
            done += 1

    def test_backward_against_nested_loop_oracle(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            c_in, c_out = (int(v) for v in rng.integers(1, 4, 2))
            length = int(rng.integers(4, 20))
            k = int(rng.integers(1, 4))
            dilation = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 4))
            padding = int(rng.integers(0, 3))
            if dilation * (k - 1) + 1 > length + 2 * padding:
                continue
            x = Tensor(rng.standard_normal((c_in, length)), requires_grad=True)
            w = Tensor(rng.standard_normal((c_out, c_in, k)), requires_grad=True)
            b = Tensor(rng.standard_normal(c_out), requires_grad=True)
            out = ad.conv1d(x, w, b, dilation, stride, padding)
            g_out = rng.standard_normal(out.shape)
            # contract output against a constant to inject the upstream gradient
            backward(ad.tsum(ad.mul(out, Tensor(g_out))))
            gx, gw, gb = naive_conv1d_grads(
                x.data, w.data, g_out, dilation, stride, padding
            )
            assert np.max(np.abs(x.grad - gx)) <= 1e-10
            assert np.max(np.abs(w.grad - gw)) <= 1e-10
            assert np.max(np.abs(b.grad - gb)) <= 1e-10

    def test_span_exceeding_padded_length_raises(self):
        x = Tensor(np.zeros((1, 4)))
        w = Tensor(np.zeros((1, 1, 5)))
        with pytest.raises(DimensionError):
            ad.conv1d(x, w, dilation=2, stride=1, padding=1)


class TestSoftmax:
    def test_zero_row_is_uniform(self):
        out = ad.softmax(Tensor([[0.0] * 5]), axis=1)
        assert np.allclose(out.data, 0.2, atol=1e-12)

    def test_shift_invariance_no_overflow(self):
        out = ad.softmax(Tensor([[1000.0, 1000.0]]), axis=1)
        assert np.allclose(out.data, [[0.5, 0.5]], atol=1e-12)

    def test_scalar_evaluation(self):
        out = ad.softmax(Tensor([[0.0, np.log(3.0)]]), axis=1)
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_rows_sum_to_one_and_positive(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 6)) * rng.uniform(0.1, 50)
        out = ad.softmax(Tensor(x), axis=1).data
        assert np.all(out > 0)
        assert np.max(np.abs(out.sum(axis=1) - 1.0)) < 1e-6

    def test_gradient(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(20):
            weights = Tensor(rng.standard_normal((3, 5)))
            x = Tensor(rng.standard_normal((3, 5)))
            worst = max(
                worst, grad_check(lambda t: ad.tsum(ad.mul(ad.softmax(t, axis=1), weights)), x)
            )
        assert worst < 1e-6


class TestElementwise:
    def test_relu_values(self):
        out = ad.relu(Tensor([-1.0, 2.0]))
        assert out.data.tolist() == [0.0, 2.0]

    def test_tanh_zero(self):
        assert ad.tanh(Tensor([0.0])).data.tolist() == [0.0]

    def test_relu_subgradient_zero_at_zero(self):
        x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
        backward(ad.tsum(ad.relu(x)))
        assert x.grad.tolist() == [0.0, 0.0, 1.0]

    def test_sum_relu_gradient_example(self):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        backward(ad.tsum(ad.relu(x)))
        assert x.grad.tolist() == [0.0, 1.0]

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError) as exc:
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
        assert "[2, 3]" in str(exc.value)

    def test_bias_broadcast_backward_sums(self):
        x = Tensor(np.ones((3, 4)))
        b = Tensor(np.zeros(4), requires_grad=True)
        backward(ad.tsum(ad.add(x, b)))
        assert b.grad.tolist() == [3.0] * 4

    @pytest.mark.parametrize(
        "fn",
        [
            lambda t: ad.tsum(ad.mul(t, t)),
            lambda t: ad.tsum(ad.tanh(t)),
            lambda t: ad.tsum(ad.power(ad.add(ad.mul(t, t), Tensor(0.5)), 1.5)),
            lambda t: ad.tsum(ad.log(ad.add(ad.mul(t, t), Tensor(1.0)))),
            lambda t: ad.tsum(ad.tmean(ad.relu(t), axis=1)),
            lambda t: ad.tsum(ad.reshape(ad.transpose(t), (20,))),
            lambda t: ad.tsum(ad.concat([t, ad.mul(t, t)], axis=0)),
            lambda t: ad.tsum(t[1:3, ::2]),
            lambda t: ad.tsum(ad.div(t, ad.add(ad.mul(t, t), Tensor(2.0)))),
        ],
        ids=["mul", "tanh", "power", "log", "mean-relu", "reshape-T", "concat", "slice", "div"],
    )
    def test_primitive_gradients_random_inputs(self, fn):
        rng = np.random.default_rng(11)
        worst = 0.0
        for _ in range(20):
            x = Tensor(rng.standard_normal((4, 5)) + 0.1)
            worst = max(worst, grad_check(fn, x))
        assert worst < 1e-6

    def test_scale(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        backward(ad.tsum(ad.scale(x, 3.0)))
        assert x.grad.tolist() == [3.0, 3.0]

    def test_clamp_min_guards_log(self):
        x = Tensor([0.0, 0.5])
        out = ad.log(ad.clamp_min(x, 1e-12))
        assert np.isfinite(out.data).all()


class TestBackward:
    def test_sum_gives_ones(self):
        w = Tensor(np.zeros((2, 3)), requires_grad=True)
        backward(ad.tsum(w))
        assert np.array_equal(w.grad, np.ones((2, 3)))

    def test_power_rule(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        backward(ad.tsum(ad.mul(w, w)))
        assert w.grad.tolist() == [2.0, 4.0]

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(ad.mul(w, w))

    def test_disconnected_loss_rejected(self):
        with pytest.raises(ContractError):
            backward(ad.tsum(Tensor([1.0])))

    def test_repeated_backward_accumulates(self):
        w = Tensor([1.0, 1.0], requires_grad=True)
        backward(ad.tsum(w))
        backward(ad.tsum(w))
        assert w.grad.tolist() == [2.0, 2.0]

    def test_tensor_used_twice_sums_paths(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal(4))
        err = grad_check(lambda t: ad.tsum(ad.add(ad.mul(t, t), ad.scale(t, 2.0))), x)
        assert err < 1e-8

    def test_no_grad_disables_recording(self):
        w = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            out = ad.tsum(ad.mul(w, w))
        assert not out.requires_grad
        assert out.is_leaf()

    def test_no_grad_is_thread_local(self):
        import threading

        w = Tensor([1.0], requires_grad=True)
        hold = threading.Event()
        release = threading.Event()

        def worker():
            with ad.no_grad():
                hold.set()
                release.wait(timeout=5)

        t = threading.Thread(target=worker)
        t.start()
        hold.wait(timeout=5)
        out = ad.mul(w, w)  # recording in this thread must be unaffected
        release.set()
        t.join()
        assert out.requires_grad and not out.is_leaf()

    def test_tape_is_topologically_ordered(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        loss = ad.tsum(ad.mul(ad.tanh(w), w))
        tape = Tape.trace(loss)
        seen = set()
        for node in tape.ordered:
            if node._entry is not None:
                for parent in node._entry.inputs:
                    if parent._entry is not None:
                        assert id(parent) in seen, "input recorded after its consumer"
            seen.add(id(node))


class TestGradCheck:
    def test_linear_function_near_exact(self):
        x = Tensor(np.random.default_rng(0).standard_normal(6))
        assert grad_check(lambda t: ad.tsum(t), x) < 1e-10

    def test_reports_wrong_gradient(self):
        # a deliberately broken function: value path tanh, gradient path of relu
        def broken(t):
            out = ad.relu(t)
            out.data = np.tanh(t.data)  # corrupt forward value only
            return ad.tsum(out)

        x = Tensor(np.array([0.3, -0.7, 1.2]))
        assert grad_check(broken, x) > 1e-2


class TestPrecisionMode:
    def test_mode_switches_tensor_dtype(self):
        ad.set_default_dtype(np.float32)
        try:
            assert Tensor([1.0]).data.dtype == np.float32
        finally:
            ad.set_default_dtype(np.float64)
        assert Tensor([1.0]).data.dtype == np.float64

    def test_rejects_exotic_dtype(self):
        with pytest.raises(ContractError):
            ad.set_default_dtype(np.int32)
