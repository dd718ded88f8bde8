"""Autodiff engine: hand-computed forwards, finite-difference gradients."""

import numpy as np
import pytest

from emorank import numerics as nm
from emorank.numerics import AdamState, NonFiniteError, Tensor, adam_step


def fd_check(build, tensors, tol=1e-4, h=1e-6):
    """Backward grads vs central differences for every tensor in ``tensors``.

    ``build`` maps the tensors to a scalar Tensor. Relative error is measured
    per tensor in the L2 norm.
    """
    loss = build()
    for t in tensors:
        t.zero_grad()
    loss.backward()
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        fd = nm.finite_difference_grad(lambda: build().item(), t, h=h)
        denom = max(np.linalg.norm(fd), 1e-10)
        rel = np.linalg.norm(analytic - fd) / denom
        assert rel < tol, f"gradient mismatch: rel error {rel:.2e}"


def weighted_sum(out: Tensor, seed: int) -> Tensor:
    """Scalar readout with fixed random weights, so no gradient symmetry
    hides a transposition bug. Weights are rebuilt from the seed on every
    call, keeping the loss a fixed function under repeated evaluation."""
    w = Tensor(np.random.default_rng(seed).normal(size=out.shape))
    return nm.sum_all(nm.mul(out, w))


# ---------------------------------------------------------------------------
# forward values


def test_matmul_identity():
    m = Tensor(np.arange(9.0).reshape(3, 3))
    out = nm.matmul(Tensor(np.eye(3)), m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_hand_example():
    out = nm.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_errors():
    with pytest.raises(ValueError):
        nm.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError):
        nm.matmul(Tensor(np.ones((2, 2, 2))), Tensor(np.ones((2, 2))))


def test_softmax_uniform():
    out = nm.softmax(Tensor([3.0, 3.0, 3.0, 3.0]))
    np.testing.assert_allclose(out.data, [0.25, 0.25, 0.25, 0.25], atol=1e-12)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(0)
    out = nm.softmax(Tensor(rng.normal(size=(5, 7)) * 10), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(5), atol=1e-6)


def test_softmax_axis_out_of_range():
    with pytest.raises(ValueError):
        nm.softmax(Tensor(np.ones((2, 2))), axis=2)


def test_sigmoid_zero():
    assert nm.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5, abs=1e-15)


def test_sigmoid_extreme_inputs_stay_finite():
    out = nm.sigmoid(Tensor([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-30)


def test_mean_over_time_constant():
    c = np.array([1.5, -2.0, 0.25])
    out = nm.mean_over_time(Tensor(np.tile(c, (7, 1))))
    np.testing.assert_allclose(out.data, c, atol=1e-12)


def test_layer_norm_forward():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 8)) * 3 + 1
    out = nm.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)))
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-3)


def test_conv1d_preserves_length_and_matches_direct():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(9, 3))
    kernel = rng.normal(size=(5, 3, 4))
    out = nm.conv1d(Tensor(x), Tensor(kernel)).data
    assert out.shape == (9, 4)
    pad_lo = 2
    padded = np.zeros((13, 3))
    padded[pad_lo:pad_lo + 9] = x
    direct = np.zeros((9, 4))
    for t in range(9):
        for tap in range(5):
            direct[t] += padded[t + tap] @ kernel[tap]
    np.testing.assert_allclose(out, direct, atol=1e-12)


def test_conv1d_kernel_one_is_pointwise_linear():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 4))
    kernel = rng.normal(size=(1, 4, 2))
    out = nm.conv1d(Tensor(x), Tensor(kernel)).data
    np.testing.assert_allclose(out, x @ kernel[0], atol=1e-12)


def test_embedding_lookup_forward_and_range():
    table = Tensor(np.arange(12.0).reshape(4, 3))
    np.testing.assert_array_equal(nm.embedding_lookup(table, 2).data, [6.0, 7.0, 8.0])
    with pytest.raises(ValueError):
        nm.embedding_lookup(table, 4)


def test_dropout_eval_identity_and_scaling():
    x = Tensor(np.ones((50, 20)))
    assert nm.dropout(x, 0.0, np.random.default_rng(0)) is x
    out = nm.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_deterministic_given_seed():
    x = Tensor(np.ones((30, 10)))
    a = nm.dropout(x, 0.3, np.random.default_rng(7)).data
    b = nm.dropout(x, 0.3, np.random.default_rng(7)).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# gradients vs finite differences


@pytest.mark.parametrize("seed", range(5))
def test_matmul_grad(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    b = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    fd_check(lambda: weighted_sum(nm.matmul(a, b), 99),
             [a, b], tol=1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_elementwise_and_reduction_grads(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 8, size=2))
    a = Tensor(rng.normal(size=shape), requires_grad=True)
    b = Tensor(rng.normal(size=shape), requires_grad=True)
    w = seed + 100

    fd_check(lambda: weighted_sum(nm.add(a, b), w), [a, b])
    fd_check(lambda: weighted_sum(nm.mul(a, b), w), [a, b])
    fd_check(lambda: weighted_sum(nm.sub(a, b), w), [a, b])
    fd_check(lambda: weighted_sum(nm.scale(a, -1.7), w), [a])
    fd_check(lambda: weighted_sum(nm.tanh(a), w), [a])
    fd_check(lambda: weighted_sum(nm.sigmoid(a), w), [a])
    fd_check(lambda: nm.mean_all(nm.mul(a, b)), [a, b])


def test_add_row_broadcast_grad():
    rng = np.random.default_rng(11)
    a = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    fd_check(lambda: weighted_sum(nm.add(a, b), 12), [a, b])


def test_relu_grad_away_from_kink():
    rng = np.random.default_rng(13)
    vals = rng.normal(size=(6, 5))
    vals = np.where(np.abs(vals) < 0.2, 0.5, vals)  # keep FD off the kink
    a = Tensor(vals, requires_grad=True)
    fd_check(lambda: weighted_sum(nm.relu(a), 14), [a])


def test_log_grad():
    rng = np.random.default_rng(15)
    a = Tensor(rng.uniform(0.5, 3.0, size=(4, 4)), requires_grad=True)
    fd_check(lambda: weighted_sum(nm.log(a), 16), [a])


def test_clip_grad_interior():
    rng = np.random.default_rng(17)
    a = Tensor(rng.uniform(-0.8, 0.8, size=(5,)), requires_grad=True)
    fd_check(lambda: weighted_sum(nm.clip(a, -1.0, 1.0), 18), [a])


def test_clip_blocks_gradient_outside():
    a = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
    nm.sum_all(nm.clip(a, -1.0, 1.0)).backward()
    np.testing.assert_array_equal(a.grad, [0.0, 1.0, 0.0])


@pytest.mark.parametrize("seed", range(5))
def test_softmax_and_log_softmax_grads(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    w = seed + 50
    fd_check(lambda: weighted_sum(nm.softmax(a, axis=-1), w), [a])
    fd_check(lambda: weighted_sum(nm.log_softmax(a, axis=-1), w), [a])


@pytest.mark.parametrize("seed", range(5))
def test_layer_norm_grads(seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.normal(size=(4, 6)) * 2 + 1, requires_grad=True)
    gain = Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
    bias = Tensor(rng.normal(size=6), requires_grad=True)
    fd_check(lambda: weighted_sum(nm.layer_norm(a, gain, bias),
                                  seed + 60),
             [a, gain, bias], tol=5e-4)


@pytest.mark.parametrize("seed", range(5))
def test_conv1d_grads(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(7, 3)), requires_grad=True)
    kernel = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
    bias = Tensor(rng.normal(size=4), requires_grad=True)
    fd_check(lambda: weighted_sum(nm.conv1d(x, kernel, bias),
                                  seed + 70),
             [x, kernel, bias])


def test_slice_concat_transpose_pick_grads():
    rng = np.random.default_rng(19)
    a = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
    w = 20
    fd_check(lambda: weighted_sum(nm.slice_cols(a, 1, 4), w), [a])
    fd_check(lambda: weighted_sum(nm.transpose(a), w), [a])
    fd_check(lambda: weighted_sum(
        nm.concat_cols([nm.slice_cols(a, 0, 2), nm.slice_cols(a, 2, 6)]), w), [a])
    v = Tensor(rng.normal(size=5), requires_grad=True)
    fd_check(lambda: nm.scale(nm.pick(v, 3), 2.5), [v])


def test_embedding_lookup_grad_scatters():
    table = Tensor(np.zeros((4, 3)), requires_grad=True)
    out = nm.embedding_lookup(table, 1)
    nm.sum_all(out).backward()
    expected = np.zeros((4, 3))
    expected[1] = 1.0
    np.testing.assert_array_equal(table.grad, expected)


def test_mean_over_time_grad():
    rng = np.random.default_rng(21)
    a = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    fd_check(lambda: weighted_sum(nm.mean_over_time(a), 22), [a])


def test_dropout_grad_matches_mask():
    x = Tensor(np.ones((20, 10)), requires_grad=True)
    out = nm.dropout(x, 0.4, np.random.default_rng(5))
    nm.sum_all(out).backward()
    # gradient is exactly the applied keep/rescale mask
    np.testing.assert_array_equal(x.grad, out.data)


# ---------------------------------------------------------------------------
# graph mechanics


def test_shared_subexpression_backward_visits_once():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    s = nm.add(x, x)  # used twice below
    out = nm.sum_all(nm.mul(s, s))  # sum((2x)^2) -> d/dx = 8x
    out.backward()
    np.testing.assert_allclose(x.grad, 8.0 * x.data, atol=1e-12)


def test_unused_tensor_gets_no_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    nm.sum_all(nm.scale(x, 2.0)).backward()
    assert unused.grad is None
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_constant_subgraph_carries_no_parents():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3))
    out = nm.add(a, b)
    assert out._parents == ()
    assert not out.requires_grad


def test_backward_determinism_bitwise():
    def run():
        rng = np.random.default_rng(42)
        a = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        b = Tensor(rng.normal(size=(6, 6)), requires_grad=True)
        loss = nm.mean_all(nm.tanh(nm.matmul(a, b)))
        loss.backward()
        return loss.item(), a.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


def test_validate_finite_raises():
    t = Tensor(np.array([1.0, np.inf]))
    with pytest.raises(NonFiniteError):
        t.validate_finite()


def test_operator_sugar():
    a = Tensor(np.array([1.0, 2.0]))
    b = Tensor(np.array([3.0, 4.0]))
    np.testing.assert_array_equal((a + b).data, [4.0, 6.0])
    np.testing.assert_array_equal((a - b).data, [-2.0, -2.0])
    np.testing.assert_array_equal((a * b).data, [3.0, 8.0])
    np.testing.assert_array_equal((2.0 * a).data, [2.0, 4.0])
    np.testing.assert_array_equal((-a).data, [-1.0, -2.0])
    np.testing.assert_array_equal((a + 1.0).data, [2.0, 3.0])


# ---------------------------------------------------------------------------
# Adam


def _single_param(value: float):
    p = Tensor(np.array([value]), requires_grad=True)
    return {"w": p}, p


def test_adam_zero_gradient_leaves_params_unchanged():
    params, p = _single_param(1.0)
    state = AdamState(params)
    adam_step(params, {"w": np.zeros(1)}, state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0])


def test_adam_first_step_moves_by_lr_against_gradient_sign():
    # f(w) = w^2 at w=1: grad 2; first bias-corrected step is -lr * sign(g)
    params, p = _single_param(1.0)
    state = AdamState(params)
    adam_step(params, {"w": np.array([2.0])}, state, lr=0.1)
    assert p.data[0] == pytest.approx(0.9, abs=1e-9)


def test_adam_converges_on_quadratic():
    params, p = _single_param(0.0)
    state = AdamState(params)
    for _ in range(200):
        grad = 2.0 * (p.data - 3.0)
        adam_step(params, {"w": grad}, state, lr=0.1)
    assert abs(p.data[0] - 3.0) < 1e-2


def test_adam_rejects_non_finite_gradient():
    params, _ = _single_param(1.0)
    state = AdamState(params)
    with pytest.raises(NonFiniteError):
        adam_step(params, {"w": np.array([np.nan])}, state, lr=0.1)


def test_adam_skips_none_gradients():
    params, p = _single_param(2.0)
    state = AdamState(params)
    adam_step(params, {"w": None}, state, lr=0.1)
    np.testing.assert_array_equal(p.data, [2.0])


def test_finite_difference_restores_values():
    t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    before = t.data.copy()
    nm.finite_difference_grad(lambda: float((t.data ** 2).sum()), t)
    np.testing.assert_array_equal(t.data, before)
