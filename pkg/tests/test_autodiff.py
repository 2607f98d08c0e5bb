import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from at2l.autodiff import Graph, GraphError, ShapeError, Tensor, backward, forward_op, gradient_wrt_input, no_grad, ops
from at2l.autodiff import kernels
from at2l.models import build_model, mlp_spec

from gradcases import LOSS_CASES, OP_CASES, check_loss, check_op
from oracles import conv2d_loops


@pytest.mark.parametrize("name", sorted(OP_CASES))
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_op_gradients_match_finite_differences(name, seed):
    assert check_op(name, seed) < 1e-4


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_loss_gradients_match_finite_differences(name, seed):
    assert check_loss(name, seed) < 1e-4


def test_matmul_values_and_shape_error():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[1.0], [1.0]])
    assert np.array_equal(ops.matmul(a, b).data, [[3.0], [7.0]])
    with pytest.raises(ShapeError, match=r"\(2, 2\).*\(3, 1\)"):
        ops.matmul(a, Tensor(np.ones((3, 1))))


def test_add_rejects_non_suffix_broadcast():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2,))))


def test_relu_and_its_gradient_at_zero():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    y = ops.relu(x)
    assert np.array_equal(y.data, [0.0, 0.0, 2.0])
    backward(ops.sum(y))
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_conv_single_pixel_kernel_is_per_pixel_linear_map():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 4, 5, 3))
    w = rng.normal(size=(1, 1, 3, 2))
    out = ops.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(2))).data
    assert np.allclose(out, x @ w[0, 0])


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 2), h=st.integers(3, 6), w=st.integers(3, 6), c=st.integers(1, 3),
       kh=st.integers(1, 3), kw=st.integers(1, 3), f=st.integers(1, 3), seed=st.integers(0, 1000))
def test_conv_matches_loop_oracle(n, h, w, c, kh, kw, f, seed):
    rng = np.random.default_rng(seed)
    x, k, b = rng.normal(size=(n, h, w, c)), rng.normal(size=(kh, kw, c, f)), rng.normal(size=f)
    got = ops.conv2d(Tensor(x), Tensor(k), Tensor(b)).data
    assert np.allclose(got, conv2d_loops(x, k, b), atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1))), Tensor(np.ones(1)))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.ones((1, 2, 2, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.ones(1)))


def test_softmax_sums_to_one_and_handles_large_logits():
    p = ops.softmax(Tensor([[1000.0, 0.0, -1000.0], [0.0, 0.0, 0.0]])).data
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(p[1], 1 / 3)
    assert p[0, 0] == 1.0


def test_log_rejects_non_positive():
    with pytest.raises(ValueError):
        ops.log(Tensor([0.0, 1.0]))


def test_dropout_eval_identity_and_train_inverted_scaling():
    x = Tensor(np.ones((200, 50)))
    assert np.array_equal(ops.dropout(x, 0.5, False).data, x.data)
    y = ops.dropout(x, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05
    with pytest.raises(ValueError):
        ops.dropout(x, 0.5, True)


def test_max_gradient_goes_to_first_argmax():
    x = Tensor([[1.0, 3.0, 3.0]], requires_grad=True)
    backward(ops.sum(ops.max(x)))
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_take_accumulates_repeated_rows():
    x = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    backward(ops.sum(ops.take(x, [1, 1, 2])))
    assert np.array_equal(x.grad, [[0, 0], [2, 2], [1, 1]])


def test_shared_subexpression_accumulates():
    x = Tensor([2.0], requires_grad=True)
    y = ops.multiply(x, x)
    backward(ops.sum(ops.add(y, y)))
    assert np.allclose(x.grad, [8.0])


def test_graph_is_topologically_ordered():
    x = Tensor([1.0, 2.0], requires_grad=True)
    a = ops.scale(x, 2.0)
    b = ops.relu(a)
    loss = ops.sum(ops.add(a, b))
    g = Graph.from_loss(loss)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for node in g.nodes:
        for p in node.parents:
            assert pos[id(p)] < pos[id(node)]
    assert len(g) == 5


def test_backward_requires_scalar_differentiable_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        backward(ops.scale(x, 2.0))
    with pytest.raises(GraphError):
        backward(ops.sum(Tensor([1.0])))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = ops.scale(x, 3.0)
    assert not y.requires_grad and y.parents == ()


def test_forward_op_dispatch():
    out = forward_op("relu", [Tensor([-1.0, 1.0])])
    assert np.array_equal(out.data, [0.0, 1.0])
    with pytest.raises(ValueError):
        forward_op("tanh", [Tensor([0.0])])


def test_gradient_wrt_input_of_linear_model():
    spec = mlp_spec("lin", [], input_shape=(3,), num_classes=2)
    model = build_model(spec, 0)
    x = np.array([[0.1, 0.2, 0.3]])
    g = gradient_wrt_input(model, x, lambda z: ops.sum(ops.take(ops.reshape(z, (-1,)), [1])))
    assert np.allclose(g, model.params["0.w"].data[:, 1][None])


def test_gradient_wrt_input_rejects_disconnected_input():
    model = build_model(mlp_spec("lin", [], input_shape=(2,)), 0)
    x = Tensor(np.zeros((1, 2)), requires_grad=True)
    other = Tensor(np.zeros((1, 2)), requires_grad=True)
    with pytest.raises(GraphError):
        gradient_wrt_input(model, x, ops.sum(model.forward(other)))


def test_numba_and_numpy_kernels_agree_bitwise():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 9, 8, 4))
    cols = kernels.im2col_numpy(x, 3, 2)
    assert np.array_equal(cols, kernels.im2col_numba(x, 3, 2))
    assert np.array_equal(kernels.col2im_numpy(cols, 9, 8), kernels.col2im_numba(cols, 9, 8))


def test_env_flag_selects_numpy_path(monkeypatch):
    monkeypatch.setenv("AT2L_NUMBA", "0")
    assert not kernels.numba_enabled()
    monkeypatch.setenv("AT2L_NUMBA", "1")
    assert kernels.numba_enabled()
