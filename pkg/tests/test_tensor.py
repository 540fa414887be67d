import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

import ebft.tensor as T
from ebft.errors import ContractError, DimensionError
from ebft.optim import Adam, SGD, adam_step
from ebft.tensor import Tape, Tensor, backward
from helpers import assert_grad_matches_fd, max_rel_err

finite_floats = st.floats(min_value=-10, max_value=10, allow_nan=False)


def _grad_check(build, tensors, n_instances=20, seed=0):
    """Run a fd check on n freshly seeded random instances."""
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        for t in tensors:
            t.data = rng.normal(size=t.shape)

        def fn():
            with Tape() as tape:
                loss = build()
            backward(loss, tape)
            return loss.item()

        assert_grad_matches_fd(fn, tensors)


# --- matmul ---------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(T.matmul(a, b).data, b.data)


def test_matmul_small_case():
    out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_mentions_both_shapes():
    with pytest.raises(DimensionError) as exc:
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


def test_matmul_grad_of_sum_is_column_sums():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)))
    with Tape() as tape:
        loss = T.scale(T.mean(T.matmul(a, b)), 6.0)  # undo mean: sum of out
    backward(loss, tape)
    expected = np.broadcast_to(b.data.sum(axis=1), (3, 4))
    assert np.allclose(a.grad, expected)


def test_matmul_grad_vs_fd():
    a = Tensor(np.zeros((3, 4)), requires_grad=True)
    b = Tensor(np.zeros((4, 2)), requires_grad=True)
    _grad_check(lambda: T.mean(T.silu(T.matmul(a, b))), [a, b])


def test_matmul_batched_grad_vs_fd():
    a = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    b = Tensor(np.zeros((4, 2)), requires_grad=True)
    _grad_check(lambda: T.mean(T.silu(T.matmul(a, b))), [a, b], n_instances=5)


# --- layer_norm -----------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor(np.ones(3)),
                       Tensor(np.zeros(3)), 1e-5)
    assert np.allclose(out.data, 0.0)


def test_layer_norm_symmetry():
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)),
                       Tensor(np.zeros(2)), 1e-12)
    assert np.allclose(out.data, [[-1.0, 1.0]], atol=1e-5)


def test_layer_norm_dim_error():
    with pytest.raises(DimensionError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)),
                     Tensor(np.zeros(3)), 1e-5)


def test_layer_norm_grad_vs_fd():
    x = Tensor(np.zeros((2, 8)), requires_grad=True)
    g = Tensor(np.zeros(8), requires_grad=True)
    b = Tensor(np.zeros(8), requires_grad=True)
    _grad_check(lambda: T.mean(T.mul(T.layer_norm(x, g, b, 1e-5),
                                     T.layer_norm(x, g, b, 1e-5))), [x, g, b])


# --- softmax ---------------------------------------------------------------

def test_softmax_symmetric_pair():
    assert np.allclose(T.softmax(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])


def test_softmax_no_overflow():
    out = T.softmax(Tensor([1000.0, 0.0]), 0).data
    assert abs(out[0] - 1.0) < 1e-12 and abs(out[1]) < 1e-12
    assert np.all(np.isfinite(out))


def test_softmax_grad_vs_fd():
    x = Tensor(np.zeros(4), requires_grad=True)
    w = Tensor(np.zeros(4), requires_grad=True)
    _grad_check(lambda: T.mean(T.mul(T.softmax(x, 0), w)), [x])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=6),
              elements=st.floats(min_value=-50, max_value=50)))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), -1).data
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) <= 1e-12)


# --- elementwise suite ------------------------------------------------------

def test_silu_at_zero():
    assert T.silu(Tensor([0.0])).data[0] == 0.0


def test_add_identity():
    x = np.array([1.0, -2.0, 3.5])
    assert np.array_equal(T.add(Tensor(x), Tensor(np.zeros(3))).data, x)


def test_elementwise_composite_grad_vs_fd():
    x = Tensor(np.zeros((2, 6)), requires_grad=True)
    y = Tensor(np.zeros((2, 6)), requires_grad=True)

    def build():
        h = T.mul(x, y)
        h = T.transpose(h, (1, 0))
        h = T.reshape(h, (3, 4))
        h = T.concat([h, T.slice_(h, (slice(0, 1),))], axis=0)
        return T.mean(T.silu(h))

    _grad_check(build, [x, y])


def test_add_broadcast_grad_vs_fd():
    x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    _grad_check(lambda: T.mean(T.silu(T.add(x, b))), [x, b], n_instances=5)


def test_shape_mismatch_raises():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(DimensionError):
        T.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


# --- reconstruction_loss ----------------------------------------------------

def test_reconstruction_loss_identity_is_exactly_zero():
    a = Tensor(np.random.default_rng(3).normal(size=(2, 3, 4)))
    assert T.reconstruction_loss(a, Tensor(a.data.copy())).item() == 0.0


def test_reconstruction_loss_single_element():
    assert T.reconstruction_loss(Tensor([2.0]), Tensor([0.0])).item() == 4.0


def test_reconstruction_loss_matches_resummation():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    expected = sum((float(x) - float(y)) ** 2 for x, y in zip(a.ravel(), b.ravel())) / 15
    assert abs(T.reconstruction_loss(Tensor(a), Tensor(b)).item() - expected) < 1e-12


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite_floats),
       arrays(np.float64, (2, 3), elements=finite_floats))
def test_reconstruction_loss_symmetric(a, b):
    assert (T.reconstruction_loss(Tensor(a), Tensor(b)).item()
            == T.reconstruction_loss(Tensor(b), Tensor(a)).item())


def test_reconstruction_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        T.reconstruction_loss(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_reconstruction_loss_grad_is_closed_form():
    rng = np.random.default_rng(5)
    w = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    x = Tensor(rng.normal(size=(3, 4)))
    tgt = Tensor(rng.normal(size=(2, 4)))
    with Tape() as tape:
        loss = T.reconstruction_loss(tgt, T.matmul(w, x))
    backward(loss, tape)
    closed = (2.0 / tgt.size) * (w.data @ x.data - tgt.data) @ x.data.T
    assert max_rel_err(w.grad, closed) < 1e-12


# --- backward contracts -----------------------------------------------------

def test_backward_sum_grad_all_ones():
    w = Tensor(np.random.default_rng(6).normal(size=(3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.scale(T.mean(w), w.size)
    backward(loss, tape)
    assert np.allclose(w.grad, 1.0)


def test_backward_twice_is_a_contract_error():
    w = Tensor([1.0], requires_grad=True)
    with Tape() as tape:
        loss = T.mean(w)
    backward(loss, tape)
    with pytest.raises(ContractError):
        backward(loss, tape)


def test_backward_non_scalar_loss_rejected():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        out = T.mul(w, w)
    with pytest.raises(ContractError):
        backward(out, tape)


def test_backward_foreign_loss_rejected():
    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        T.mean(w)
    with pytest.raises(ContractError):
        backward(T.mean(w), tape)  # built outside the tape


def test_backward_empty_tape_is_noop():
    loss = Tensor(1.0)
    backward(loss, Tape())  # no error


def test_backward_zeroes_unreachable_grads():
    used = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        T.mean(unused)  # recorded but not reachable from loss
        loss = T.mean(used)
    backward(loss, tape)
    assert np.array_equal(unused.grad, np.zeros(2))
    assert np.allclose(used.grad, 0.5)


def test_tape_is_topologically_ordered():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        h = T.mul(x, x)
        T.mean(T.add(h, x))
    produced = set()
    leaves = {id(x)}
    for op in tape.ops:
        for t in op.inputs:
            assert id(t) in produced or id(t) in leaves or not t.requires_grad
        produced.add(id(op.out))


def test_gradients_bit_identical_across_replays():
    rng = np.random.default_rng(7)
    data = rng.normal(size=(4, 4))
    grads = []
    for _ in range(2):
        w = Tensor(data, requires_grad=True)
        with Tape() as tape:
            loss = T.mean(T.silu(T.matmul(w, T.transpose(w, (1, 0)))))
        backward(loss, tape)
        grads.append(w.grad.copy())
    assert np.array_equal(grads[0], grads[1])


# --- adam -------------------------------------------------------------------

def _fresh_state(value):
    p = Tensor(np.asarray(value, dtype=float))
    return (p, Tensor(np.zeros_like(p.data)), Tensor(np.zeros_like(p.data)))


def test_adam_zero_gradient_leaves_params_unchanged():
    state = _fresh_state([1.0, -2.0])
    before = state[0].data.copy()
    adam_step([state], [np.zeros(2)], lr=2e-4, step=1)
    assert np.array_equal(state[0].data, before)


def test_adam_first_step_magnitude():
    # g=1, step 1: m_hat = v_hat = 1, so the update is lr / (1 + eps)
    state = _fresh_state([1.0])
    lr, eps = 2e-4, 1e-8
    adam_step([state], [np.ones(1)], lr=lr, eps=eps, step=1)
    expected = 1.0 - lr / (1.0 + eps)
    assert abs(state[0].data[0] - expected) < 1e-15


def test_adam_monotone_on_quadratic():
    # f(x) = x^2 from x=1: two identical-config steps both decrease f
    state = _fresh_state([1.0])
    opt_vals = [1.0]
    for step in (1, 2):
        g = 2.0 * state[0].data
        adam_step([state], [g], lr=1e-2, step=step)
        opt_vals.append(float(state[0].data[0]))
    assert opt_vals[0] > opt_vals[1] > opt_vals[2] > 0


def test_adam_shape_mismatch():
    state = _fresh_state([1.0, 2.0])
    with pytest.raises(DimensionError):
        adam_step([state], [np.zeros(3)], lr=1e-3, step=1)


def test_adam_class_reads_tensor_grads():
    p = Tensor(np.ones(3), requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.ones(3)
    opt.step()
    assert np.all(p.data < 1.0)


def test_sgd_step_is_plain_descent():
    p = Tensor(np.array([1.0, 2.0]))
    SGD([p], lr=0.5).step([np.array([1.0, -1.0])])
    assert np.allclose(p.data, [0.5, 2.5])
