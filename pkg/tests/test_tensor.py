import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsrbench import tensor as tn
from tsrbench.errors import ContractError, DimensionError, GraphError, ParameterError
from tsrbench.tensor import Graph, Tensor

from conftest import analytic_grads, numeric_grad, rel_err, scalar_fn

seeds = st.integers(min_value=0, max_value=2**31 - 1)


def check_fd(build, arrays, tol=1e-4):
    grads = analytic_grads(build, *arrays)
    for k, a in enumerate(arrays):
        num = numeric_grad(scalar_fn(build, arrays, k), a)
        assert rel_err(grads[k], num) < tol


class TestMatmul:
    def test_identity(self):
        out = tn.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_row_times_column(self):
        assert tn.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a, b, w = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
        check_fd(lambda x, y: tn.sum(tn.matmul(x, y) * Tensor(w, dtype=np.float64)), [a, b])

    def test_batched_left_operand(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        check_fd(lambda x, y: tn.sum(tn.tanh(x @ y)), [a, b])


class TestConv:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 6))
        out = tn.conv1d_dilated_causal(Tensor(x), Tensor([[[1.0]]]), 1)
        np.testing.assert_allclose(out.data, x.astype(np.float32))

    def test_hand_example(self):
        out = tn.conv1d_dilated_causal(Tensor([[1, 2, 3]]), Tensor([[[1, 1]]]), 1)
        assert out.data.tolist() == [[1, 3, 5]]

    def test_dilation_must_be_positive(self):
        with pytest.raises(ParameterError):
            tn.conv1d_dilated_causal(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 1, 2))), 0)

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        k, d = int(rng.integers(1, 4)), int(rng.choice([1, 2, 4]))
        x, w = rng.normal(size=(2, 3, 7)), rng.normal(size=(4, 3, k))
        probe = rng.normal(size=(2, 4, 7))
        check_fd(lambda a, b: tn.sum(tn.conv1d_dilated_causal(a, b, d) * Tensor(probe, dtype=np.float64)), [x, w])

    @settings(max_examples=30, deadline=None)
    @given(seeds)
    def test_causality(self, seed):
        rng = np.random.default_rng(seed)
        T = 9
        x, w = rng.normal(size=(2, T)), rng.normal(size=(3, 2, 3))
        t = int(rng.integers(0, T))
        base = tn.conv1d_dilated_causal(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), 2).data
        x2 = x.copy()
        x2[:, t] += 5.0
        moved = tn.conv1d_dilated_causal(Tensor(x2, dtype=np.float64), Tensor(w, dtype=np.float64), 2).data
        np.testing.assert_array_equal(base[:, :t], moved[:, :t])


class TestElementwise:
    def test_relu(self):
        assert tn.relu(Tensor([-1, 0, 2])).data.tolist() == [0, 0, 2]

    def test_sigmoid_zero(self):
        assert float(tn.sigmoid(Tensor([0.0])).data[0]) == 0.5

    def test_tanh_gradient_at_zero(self):
        (g,) = analytic_grads(lambda x: tn.sum(tn.tanh(x)), np.array([0.0]))
        assert g[0] == pytest.approx(1.0)
        num = numeric_grad(lambda x: float(np.tanh(x).sum()), np.array([0.0]))
        assert rel_err(g, num) < 1e-6

    def test_broadcast_mismatch(self):
        with pytest.raises(DimensionError):
            tn.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_named_dispatch(self):
        x = Tensor([1.0, -2.0])
        np.testing.assert_array_equal(tn.elementwise(x, "relu").data, [1.0, 0.0])
        np.testing.assert_array_equal(tn.elementwise(x, "mul", Tensor([3.0, 3.0])).data, [3.0, -6.0])

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        y = y + np.sign(y) * 0.5  # keep the divisor away from zero

        def build(a, b):
            return tn.sum(tn.sigmoid(a * b) + tn.tanh(a - b) / b + tn.exp(a * 0.3))

        check_fd(build, [x, y])

    def test_relu_gradient_away_from_kink(self):
        x = np.array([[-1.5, 0.7], [2.0, -0.2]])
        check_fd(lambda a: tn.sum(tn.relu(a) * a), [x])


class TestReductionsAndShapes:
    @settings(max_examples=50, deadline=None)
    @given(seeds)
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 3, 4))
        probe = rng.normal(size=(4, 3))

        def build(a):
            m = tn.mean(a, axis=0)
            s = tn.sum(a * a, axis=2, keepdims=True)
            r = tn.reshape(a, (6, 4))[1:4]
            return tn.sum(tn.transpose(m) * Tensor(probe, dtype=np.float64)) + tn.sum(s) + tn.sum(tn.tanh(r))

        check_fd(build, [x])

    def test_stack_and_fancy_index(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(3,)), rng.normal(size=(3,))
        check_fd(lambda x, y: tn.sum(tn.getitem(tn.stack([x, y], 1), ([0, 0, 2], [1, 1, 0])) * 2.0), [a, b])

    def test_layer_norm(self):
        rng = np.random.default_rng(2)
        x, gamma, beta = rng.normal(size=(4, 5)), rng.normal(size=5), rng.normal(size=5)
        probe = rng.normal(size=(4, 5))
        check_fd(lambda a, g, b: tn.sum(tn.layer_norm(a, g, b) * Tensor(probe, dtype=np.float64)), [x, gamma, beta])

    def test_reductions_accumulate_in_double(self):
        x = Tensor(np.full(10**6, 0.1, dtype=np.float32))
        assert float(tn.sum(x).data) == pytest.approx(10**6 * float(np.float32(0.1)), rel=1e-7)


class TestSoftmax:
    def test_equal_logits(self):
        assert float(tn.softmax_cross_entropy(Tensor([0.3, 0.3]), 0).data) == pytest.approx(math.log(2), rel=1e-6)

    def test_saturated(self):
        assert float(tn.softmax_cross_entropy(Tensor([10.0, -10.0]), 0).data) < 1e-4

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            tn.softmax_cross_entropy(Tensor([1.0, 2.0]), 2)

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=4) * 3
        c = int(rng.integers(0, 4))
        (g,) = analytic_grads(lambda a: tn.softmax_cross_entropy(a, c), z)
        p = np.exp(z - z.max())
        p /= p.sum()
        np.testing.assert_allclose(g, p - np.eye(4)[c], atol=1e-12)
        assert rel_err(g, numeric_grad(scalar_fn(lambda a: tn.softmax_cross_entropy(a, c), [z], 0), z)) < 1e-4

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_softmax_is_a_distribution(self, seed):
        z = np.random.default_rng(seed).normal(size=(3, 6)) * 20
        p = tn.softmax(Tensor(z)).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)

    def test_batched_mean_loss(self):
        rng = np.random.default_rng(4)
        z, y = rng.normal(size=(5, 3)), np.array([0, 2, 1, 1, 0])
        check_fd(lambda a: tn.softmax_cross_entropy(a, y), [z])


class TestBackward:
    def test_sum_gives_ones(self):
        (g,) = analytic_grads(lambda x: tn.sum(x), np.zeros((2, 3, 4)))
        np.testing.assert_array_equal(g, np.ones((2, 3, 4)))

    def test_square(self):
        (g,) = analytic_grads(lambda x: tn.sum(x * x), np.array([3.0]))
        assert g.tolist() == [6.0]

    @settings(max_examples=100, deadline=None)
    @given(seeds)
    def test_two_layer_tanh_net(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(5, 3))
        w1, b1, w2, b2 = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 2)), rng.normal(size=2)
        y = rng.integers(0, 2, size=5)

        def build(a, b, c, d):
            h = tn.tanh(Tensor(x, dtype=np.float64) @ a + b)
            return tn.softmax_cross_entropy(h @ c + d, y)

        check_fd(build, [w1, b1, w2, b2])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Graph() as g:
            y = x * 2.0
        with pytest.raises(ContractError):
            g.backward(y)

    def test_second_backward_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Graph() as g:
            loss = tn.sum(x * x)
        g.backward(loss)
        with pytest.raises(GraphError):
            g.backward(loss)

    def test_leaf_gradients_accumulate_until_reset(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        for _ in range(2):
            with Graph() as g:
                loss = tn.sum(x * 3.0)
            g.backward(loss)
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])
        x.zero_grad()
        assert x.grad is None

    def test_wrt_restricts_leaves(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = Tensor(np.ones(2), requires_grad=True)
        with Graph(wrt=[a]) as g:
            loss = tn.sum(a * b)
        g.backward(loss)
        assert a.grad is not None and b.grad is None

    def test_tape_is_topological(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Graph() as g:
            tn.sum(tn.tanh(x * 2.0) + x)
        produced = [id(e.output) for e in g.entries]
        for k, entry in enumerate(g.entries):
            later = set(produced[k:])
            assert not any(id(i) in later for i in entry.inputs)

    def test_nothing_recorded_outside_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = tn.tanh(x)
        assert tn.current_graph() is None
        assert not y.requires_grad

    def test_forward_is_deterministic(self):
        rng = np.random.default_rng(5)
        x, w = rng.normal(size=(2, 3, 20)), rng.normal(size=(4, 3, 3))
        a = tn.conv1d_dilated_causal(Tensor(x), Tensor(w), 2).data
        b = tn.conv1d_dilated_causal(Tensor(x), Tensor(w), 2).data
        assert a.tobytes() == b.tobytes()

    def test_graphs_are_thread_confined(self):
        results = {}

        def work(k):
            x = Tensor(np.full(3, float(k)), requires_grad=True, dtype=np.float64)
            with Graph() as g:
                loss = tn.sum(x * x)
            g.backward(loss)
            results[k] = x.grad.copy()

        threads = [threading.Thread(target=work, args=(k,)) for k in range(1, 5)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for k in range(1, 5):
            np.testing.assert_array_equal(results[k], np.full(3, 2.0 * k))
