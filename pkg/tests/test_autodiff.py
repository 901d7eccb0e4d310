import numpy as np
import pytest

from dynreg.autodiff import Graph, Parameter, backward, grad_check, relative_error
from dynreg.errors import ShapeError


def scalar_sum(g, node):
    """Sum of a 2-D node's entries, expressed with matmul."""
    n, d = g.value(node).shape
    left = g.const(np.ones((1, n)))
    right = g.const(np.ones((d, 1)))
    return g.matmul(g.matmul(left, node), right)


class TestForward:
    def test_relu(self):
        g = Graph()
        out = g.relu(g.const([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(g.value(out), [0.0, 0.0, 2.0])

    def test_matmul_identity(self):
        m = np.random.default_rng(0).standard_normal((3, 3))
        g = Graph()
        out = g.matmul(g.const(np.eye(3)), g.const(m))
        np.testing.assert_array_equal(g.value(out), m)

    def test_conv_identity_kernel(self):
        x = np.random.default_rng(1).standard_normal((2, 1, 5, 5))
        g = Graph()
        out = g.conv2d(g.const(x), g.const(np.ones((1, 1, 1, 1))))
        np.testing.assert_array_equal(g.value(out), x)

    def test_conv3x3_matches_direct_loop(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 5, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        for stride in (1, 2):
            g = Graph()
            out = g.value(g.conv2d(g.const(x), g.const(w), stride))
            xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
            ho, wo = (5 - 1) // stride + 1, (6 - 1) // stride + 1
            ref = np.zeros((2, 4, ho, wo))
            for n in range(2):
                for o in range(4):
                    for i in range(ho):
                        for j in range(wo):
                            patch = xp[n, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                            ref[n, o, i, j] = np.sum(patch * w[o])
            np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_softmax_cross_entropy_value(self):
        logits = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 0.5]])
        g = Graph()
        loss = g.softmax_cross_entropy(g.const(logits), [0, 2])
        expected = np.mean([-np.log(np.exp(2) / (np.exp(2) + 1 + np.exp(-1))), np.log(3.0)])
        assert float(g.value(loss)) == pytest.approx(expected, abs=1e-14)

    def test_batchnorm_train_normalizes(self):
        x = np.random.default_rng(3).standard_normal((8, 2, 3, 3)) * 5 + 2
        g = Graph()
        out = g.value(g.batchnorm(g.const(x), g.const(np.ones(2)), g.const(np.zeros(2))))
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-5)

    def test_concat_and_pool_shapes(self):
        g = Graph()
        a = g.const(np.zeros((2, 3, 4, 4)))
        b = g.const(np.ones((2, 1, 4, 4)))
        c = g.concat(a, b)
        assert g.value(c).shape == (2, 4, 4, 4)
        np.testing.assert_array_equal(g.value(g.global_avg_pool(c))[:, 3], [1.0, 1.0])


class TestErrors:
    def test_matmul_shape_mismatch_names_op_and_shapes(self):
        g = Graph()
        with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
            g.matmul(g.const(np.zeros((2, 3))), g.const(np.zeros((2, 3))))

    def test_unknown_kind(self):
        g = Graph()
        with pytest.raises(ValueError, match="unknown op kind"):
            g.forward_op("maxpool", (g.const(np.zeros(2)),))

    def test_conv_kernel_size_rejected(self):
        g = Graph()
        with pytest.raises(ShapeError, match="conv2d"):
            g.conv2d(g.const(np.zeros((1, 1, 5, 5))), g.const(np.zeros((1, 1, 5, 5))))

    def test_conv_stride_rejected(self):
        g = Graph()
        with pytest.raises(ShapeError, match="stride"):
            g.conv2d(g.const(np.zeros((1, 1, 5, 5))), g.const(np.zeros((1, 1, 3, 3))), stride=3)

    def test_add_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeError, match="add"):
            g.add(g.const(np.zeros((2, 3))), g.const(np.zeros((3, 2))))

    def test_concat_spatial_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeError, match="concat"):
            g.concat(g.const(np.zeros((1, 1, 4, 4))), g.const(np.zeros((1, 1, 3, 4))))

    def test_backward_needs_scalar(self):
        g = Graph()
        w = g.param(np.ones((2, 2)))
        with pytest.raises(ShapeError, match="scalar"):
            backward(g, g.relu(w))

    def test_inputs_must_be_earlier_nodes(self):
        g = Graph()
        with pytest.raises(ValueError):
            g.forward_op("relu", (5,))


class TestBackward:
    def test_linear_gradient_is_input(self):
        x = np.array([[1.5], [-2.0], [0.25]])
        g = Graph()
        w = g.param(np.array([[0.3, -0.7, 1.1]]))
        loss = g.matmul(w, g.const(x))
        grads = backward(g, loss)
        np.testing.assert_array_equal(grads[w], x.T)

    def test_relu_gradient(self):
        g = Graph()
        w = g.param(np.array([[-1.0, 2.0]]))
        loss = scalar_sum(g, g.relu(w))
        np.testing.assert_array_equal(backward(g, loss)[w], [[0.0, 1.0]])

    def test_decoupled_scale_uses_backward_value(self):
        g = Graph()
        w = g.param(np.array([[1.0, 2.0]]))
        loss = scalar_sum(g, g.scalar_mul(w, 0.3, backward_scale=0.8))
        assert g.value(loss).item() == pytest.approx(0.9)
        np.testing.assert_allclose(backward(g, loss)[w], [[0.8, 0.8]])

    def test_parameter_reused_once_per_graph(self):
        p = Parameter(np.array([[2.0]]))
        g = Graph()
        a = g.param(p)
        assert g.param(p) == a
        loss = g.matmul(g.param(p), g.param(p))
        np.testing.assert_allclose(backward(g, loss)[a], [[4.0]])

    def test_deterministic(self):
        def run():
            rng = np.random.default_rng(5)
            g = Graph()
            x = g.const(rng.standard_normal((3, 2, 4, 4)))
            w = g.param(rng.standard_normal((3, 2, 3, 3)))
            h = g.relu(g.conv2d(x, w))
            loss = g.softmax_cross_entropy(g.global_avg_pool(h), [0, 1, 2])
            return g.value(loss), backward(g, loss)[w]
        (l1, g1), (l2, g2) = run(), run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()

    def test_replay_reproduces_values(self):
        rng = np.random.default_rng(6)
        g = Graph()
        w = g.param(rng.standard_normal((4, 3)))
        h = g.relu(g.matmul(g.const(rng.standard_normal((5, 4))), w))
        loss = g.softmax_cross_entropy(h, [0, 1, 2, 0, 1])
        for a, b in zip(g.replay(), (n.value for n in g.nodes)):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(g.replay(full=True), (n.value for n in g.nodes)):
            np.testing.assert_array_equal(a, b)

    def test_replay_recomputes_only_downstream(self):
        g = Graph()
        a = g.param(np.array([[1.0, 2.0]]))
        b = g.param(np.array([[3.0], [4.0]]))
        c = g.relu(g.const(np.array([[5.0]])))
        out = g.add(g.matmul(a, b), c)
        values = g.replay({a: np.array([[0.0, 1.0]])})
        assert values[c] is g.nodes[c].value
        assert values[out].item() == 9.0

    def test_surrogate_recomputes_forward_with_backward_scale(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((3, 2))

        def build(scale, backward_scale):
            g = Graph()
            w = g.param(np.eye(2))
            h = g.scalar_mul(g.matmul(g.const(x), w), scale, backward_scale, stochastic=True)
            return g, g.softmax_cross_entropy(h, [0, 1, 0])

        g, loss = build(0.3, 1.7)
        ref, ref_loss = build(1.7, 1.7)
        assert g.surrogate().value(loss).item() == pytest.approx(ref.value(ref_loss).item(), abs=1e-14)


# -- finite-difference agreement, one randomized graph per op kind ------------------


def graph_for(kind, seed):
    rng = np.random.default_rng(seed)
    g = Graph()
    n = 3
    if kind == "matmul":
        a = g.param(rng.standard_normal((n, 4)))
        b = g.param(rng.standard_normal((4, 3)))
        logits = g.matmul(a, b)
    elif kind == "conv2d":
        x = g.param(rng.standard_normal((n, 2, 5, 5)))
        w = g.param(rng.standard_normal((3, 2, 3, 3)))
        w1 = g.param(rng.standard_normal((3, 3, 1, 1)))
        h = g.conv2d(g.conv2d(x, w, stride=int(rng.integers(1, 3))), w1, stride=int(rng.integers(1, 3)))
        logits = g.global_avg_pool(h)
    elif kind == "add":
        a = g.param(rng.standard_normal((n, 3)))
        b = g.param(rng.standard_normal(3))
        logits = g.add(a, b)
    elif kind == "scalar_mul":
        a = g.param(rng.standard_normal((n, 3)))
        scale = rng.uniform(-2, 2, size=n) if seed % 2 else float(rng.uniform(-2, 2))
        logits = g.scalar_mul(a, scale)
    elif kind == "relu":
        a = g.param(rng.standard_normal((n, 3)))
        logits = g.relu(a)
    elif kind == "batchnorm":
        x = g.param(rng.standard_normal((n + 2, 3, 2, 2)))
        gamma = g.param(rng.uniform(0.5, 1.5, 3))
        beta = g.param(rng.standard_normal(3))
        training = bool(seed % 2)
        h = g.batchnorm(x, gamma, beta, training, rng.standard_normal(3), rng.uniform(0.5, 2, 3))
        w = g.const(rng.standard_normal((n + 2, 1)))
        logits = g.global_avg_pool(g.conv2d(h, g.const(rng.standard_normal((3, 3, 1, 1)))))
        return g, g.softmax_cross_entropy(logits, rng.integers(0, 3, n + 2))
    elif kind == "global_avg_pool":
        x = g.param(rng.standard_normal((n, 3, 3, 3)))
        logits = g.global_avg_pool(x)
    elif kind == "concat":
        a = g.param(rng.standard_normal((n, 1, 2, 2)))
        b = g.param(rng.standard_normal((n, 2, 2, 2)))
        logits = g.global_avg_pool(g.concat(a, b))
    elif kind == "softmax_cross_entropy":
        logits = g.param(rng.standard_normal((n, 4)) * 3)
    else:
        raise AssertionError(kind)
    return g, g.softmax_cross_entropy(logits, rng.integers(0, g.value(logits).shape[1], n))


KINDS = ["matmul", "conv2d", "add", "scalar_mul", "relu", "batchnorm", "global_avg_pool", "concat",
         "softmax_cross_entropy"]


@pytest.mark.parametrize("kind", KINDS)
def test_finite_difference_agreement(kind):
    for seed in range(20):
        g, loss = graph_for(kind, seed)
        report = grad_check(g, loss, step=1e-5)
        assert report.max_rel_error < 1e-4, (kind, seed, report.per_parameter)


def test_linear_graph_is_exact():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        g = Graph()
        w = g.param(rng.standard_normal((1, 6)))
        b = g.param(rng.standard_normal((1, 1)))
        loss = g.add(g.matmul(w, g.const(rng.standard_normal((6, 1)))), b)
        # central differences are exact on linear maps; only rounding (~eps*|loss|/step) remains
        assert grad_check(g, loss, step=1.0).max_rel_error < 1e-10
        assert grad_check(g, loss, step=1e-5).max_rel_error < 1e-7


def test_grad_check_rejects_unfrozen_stochastic_node():
    g = Graph()
    w = g.param(np.ones((2, 2)))
    loss = g.softmax_cross_entropy(g.scalar_mul(w, 0.4, 0.9, stochastic=True), [0, 1])
    with pytest.raises(ValueError, match="unfrozen"):
        grad_check(g, loss)
    assert grad_check(g.frozen(), loss).max_rel_error < 1e-6


def test_relative_error_floor():
    assert relative_error(1e-12, 0.0)[()] == pytest.approx(1e-6)
    assert relative_error(2.0, 1.0)[()] == pytest.approx(0.5)


def test_gradients_have_parameter_shapes():
    rng = np.random.default_rng(0)
    g = Graph()
    x = g.const(rng.standard_normal((2, 3, 4, 4)))
    w = g.param(rng.standard_normal((5, 3, 3, 3)))
    gamma = g.param(np.ones(5))
    beta = g.param(np.zeros(5))
    h = g.relu(g.batchnorm(g.conv2d(x, w, 2), gamma, beta))
    loss = g.softmax_cross_entropy(g.global_avg_pool(h), [0, 4])
    grads = backward(g, loss)
    for pid in g.parameters:
        assert grads[pid].shape == g.value(pid).shape
    for node in g.nodes:
        assert all(i < node.id for i in node.inputs)
