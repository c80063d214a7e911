import numpy as np
import pytest

from gsrw.gradcheck import (
    check_batch_objective,
    check_head_backward,
    check_loss_xent,
    check_rw_backward,
    check_softmax_backward,
    run_gradcheck,
)
from gsrw.gradients import (
    RWBackwardState,
    baseline_backward,
    finite_diff_oracle,
    head_backward,
    max_relative_error,
    rw_backward,
    softmax_backward,
)
from gsrw.random_walk import normalize

from conftest import random_params


def _neumann_hat(W, lam, terms=4000):
    """(1 - lam) * sum_t (lam W)^t, independent of any factorisation."""
    n = W.shape[0]
    acc = np.zeros((n, n))
    term = np.eye(n)
    for _ in range(terms):
        acc += term
        term = lam * W @ term
    return (1 - lam) * acc


def test_finite_diff_quadratic():
    g = finite_diff_oracle(lambda x: float(np.sum(x**2)), [1.0, 2.0], 1e-6)
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_finite_diff_constant():
    np.testing.assert_allclose(finite_diff_oracle(lambda x: 3.0, np.ones(4)), 0.0, atol=1e-8)


def test_finite_diff_bilinear():
    g = finite_diff_oracle(lambda x: float(x[0] * x[1]), [3.0, 5.0], 1e-6)
    np.testing.assert_allclose(g, [5.0, 3.0], atol=1e-7)


def test_finite_diff_nonfinite():
    with pytest.raises(FloatingPointError):
        finite_diff_oracle(lambda x: float("inf"), [0.0])


def test_rw_backward_lambda_zero(rng):
    W = normalize(rng.normal(size=(5, 5)))
    state = RWBackwardState.forward(W, rng.uniform(size=5), 0.0)
    g = rng.normal(size=5)
    d_y0, d_W = rw_backward(state, g)
    np.testing.assert_array_equal(d_y0, g)
    np.testing.assert_array_equal(d_W, 0.0)


def test_rw_backward_single_output_row():
    W = 0.5 * (1 - np.eye(3))
    state = RWBackwardState.forward(W, [0.9, 0.2, 0.4], 0.5)
    d_y0, _ = rw_backward(state, [1.0, 0.0, 0.0])
    W_hat = _neumann_hat(W, 0.5, terms=200)
    np.testing.assert_allclose(d_y0, W_hat[0], atol=1e-14)
    # uniform 3-node graph, lam=1/2: inv(I - W/2) = 0.8 I + 0.4 J, so hat W = 0.4 I + 0.2 J
    np.testing.assert_allclose(W_hat[0], [0.6, 0.2, 0.2], atol=1e-14)


def test_rw_backward_state_consistency(rng):
    W = normalize(rng.normal(size=(6, 6)))
    y0 = rng.uniform(size=6)
    state = RWBackwardState.forward(W, y0, 0.9)
    np.testing.assert_allclose(_neumann_hat(W, 0.9) @ y0, state.y_inf, atol=1e-10)
    state.y_inf = state.y_inf + 1e-3
    with pytest.raises(ValueError, match="inconsistent"):
        rw_backward(state, np.ones(6))


def test_rw_backward_quadratic_loss_fd(rng):
    n, lam = 6, 0.95
    W = normalize(rng.normal(size=(n, n)))
    y0, target = rng.uniform(size=n), rng.uniform(size=n)
    state = RWBackwardState.forward(W, y0, lam)
    d_y0, d_W = rw_backward(state, 2 * (state.y_inf - target))
    W_hat = _neumann_hat(W, lam)

    def loss_y0(v):
        return float(np.sum((W_hat @ v - target) ** 2))

    off = ~np.eye(n, dtype=bool)

    def loss_w(vals):
        W2 = W.copy()
        W2[off] = vals
        return float(np.sum((_neumann_hat(W2, lam) @ y0 - target) ** 2))

    assert max_relative_error(d_y0, finite_diff_oracle(loss_y0, y0)) < 1e-5
    assert max_relative_error(d_W[off], finite_diff_oracle(loss_w, W[off])) < 1e-5
    assert np.all(np.diag(d_W) == 0)


def test_rw_gradient_sign_opposes_leading_minus(rng):
    # the layer Jacobian is +lam * A^-T g y^T; a leading minus fails the oracle
    assert check_rw_backward(5, 0.9, 3)[0] < 1e-5
    assert check_rw_backward(5, 0.9, 3, fault="sign-flip")[0] > 1e-1


def test_softmax_backward_zero_and_constant(rng):
    S = rng.normal(size=(4, 4))
    W = normalize(S)
    np.testing.assert_array_equal(softmax_backward(S, W, np.zeros((4, 4))), 0.0)
    const = np.repeat(rng.normal(size=(4, 1)), 4, axis=1)
    np.fill_diagonal(const, 0.0)
    np.testing.assert_allclose(softmax_backward(S, W, const), 0.0, atol=1e-15)


def test_softmax_backward_fd():
    assert check_softmax_backward(5, 0)[0] < 1e-5


def test_softmax_backward_shape_mismatch():
    with pytest.raises(ValueError):
        softmax_backward(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((2, 2)))


def test_head_backward_zero(rng):
    params = random_params(rng, 4, 2)
    grads = head_backward(rng.normal(size=4), rng.normal(size=(3, 4)), params, np.zeros((2, 3)), np.zeros((2, 3, 3)))
    assert not np.any(grads.probe) and not np.any(grads.gallery) and not np.any(grads.param_vector())


def test_head_backward_group_isolation(rng):
    params = random_params(rng, 6, 3)
    d_y0 = np.zeros((3, 4))
    d_S = np.zeros((3, 4, 4))
    d_y0[1] = rng.normal(size=4)
    d_S[1] = rng.normal(size=(4, 4))
    grads = head_backward(rng.normal(size=6), rng.normal(size=(4, 6)), params, d_y0, d_S)
    for k in (0, 2):
        sl = params.group_slice(k)
        assert not np.any(grads.params.group_weights[k])
        assert grads.params.group_biases[k] == 0
        assert not np.any(grads.params.norm_scale[sl])
        assert not np.any(grads.probe[sl]) and not np.any(grads.gallery[:, sl])
    assert np.any(grads.params.group_weights[1])


@pytest.mark.parametrize("K", [1, 2, 4])
@pytest.mark.parametrize("n", [3, 6])
def test_head_backward_fd(n, K):
    assert check_head_backward(n, K, seed=n * 10 + K)[0] < 1e-5


def test_head_backward_shape_mismatch(rng):
    params = random_params(rng, 4, 2)
    with pytest.raises(ValueError):
        head_backward(rng.normal(size=4), rng.normal(size=(3, 4)), params, np.zeros((2, 4)), None)


def test_baseline_backward():
    np.testing.assert_array_equal(baseline_backward(1, 0.7, 4), [0, 0.7, 0, 0])
    np.testing.assert_array_equal(baseline_backward(2, 0.0, 4), np.zeros(4))
    with pytest.raises(IndexError):
        baseline_backward(4, 1.0, 4)


def test_dense_supervision_single_output(rng):
    n, lam = 7, 0.95
    S = rng.normal(size=(n, n))
    W = normalize(S)
    state = RWBackwardState.forward(W, rng.uniform(0.1, 0.9, n), lam)
    g = np.zeros(n)
    g[2] = -1.3
    d_y0, d_W = rw_backward(state, g)
    d_S = softmax_backward(S, W, d_W)
    assert np.count_nonzero(d_y0) == n
    assert np.count_nonzero(d_S[~np.eye(n, dtype=bool)]) == n * (n - 1)


def test_xent_fd():
    assert check_loss_xent(8, 0)[0] < 1e-5


@pytest.mark.parametrize("mode", ["gsrw", "rw_only", "baseline"])
def test_batch_objective_fd(mode):
    assert check_batch_objective(2, 0.95, mode, seed=4)[0] < 1e-5


def test_small_gradcheck_grid_passes():
    results = run_gradcheck(sizes=(3,), groups=(1, 2), lambdas=(0.0, 0.95), seeds=(0,), include_pipeline=False)
    assert results and all(r.passed for r in results)


def test_lambda_zero_errors_at_noise_level():
    results = run_gradcheck(sizes=(4, 8), groups=(1,), lambdas=(0.0,), seeds=(0, 1), include_pipeline=False)
    for r in results:
        if r.name.startswith("rw_backward"):
            assert r.max_abs_error < 1e-9
