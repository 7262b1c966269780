import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from sgpmil.errors import InvalidArgumentError
from sgpmil.kernel import KernelParams, cholesky_psd, kernel_matrix
from sgpmil.sgp_attention import (
    AttentionPosterior,
    SgpAttention,
    SgpAttentionState,
    kl_inducing,
    normalize_attention,
    sample_attention,
    variational_marginal,
)

from . import oracles
from .conftest import kparams_tuple, random_state


def with_prior_cov(state, scale=1.0):
    kzz = kernel_matrix(state.inducing_locations, state.inducing_locations, state.kernel)
    factor, _ = cholesky_psd(kzz)
    state.variational_cov_factor = np.sqrt(scale) * factor
    state.variational_mean = state.prior_mean.clone()
    return state


def test_matches_explicit_inverse_oracle():
    state = random_state(0, m=4, d=3)
    h = np.random.default_rng(1).uniform(-1, 1, (7, 3))
    post = variational_marginal(h, state, diag_only=False)
    mean, cov = oracles.marginal(h, state.inducing_locations.numpy(), state.variational_mean.numpy(),
                                 state.variational_cov.numpy(), state.prior_mean.numpy(),
                                 state.lm_weights.numpy(), float(state.lm_bias), kparams_tuple(state))
    np.testing.assert_allclose(post.mean.numpy(), mean, atol=1e-9)
    np.testing.assert_allclose(post.covariance.numpy(), cov, atol=1e-9)


def test_prior_recovery():
    state = with_prior_cov(random_state(3, m=6, d=4))
    h = np.random.default_rng(2).normal(size=(10, 4))
    post = variational_marginal(h, state, diag_only=False)
    mu_x = h @ state.lm_weights.numpy() + float(state.lm_bias)
    kxx = kernel_matrix(h, h, state.kernel).numpy()
    np.testing.assert_allclose(post.mean.numpy(), mu_x, atol=1e-9)
    np.testing.assert_allclose(post.covariance.numpy(), kxx, atol=1e-9)


def test_constant_mean_without_lm():
    state = with_prior_cov(random_state(4, use_lm=False))
    h = np.random.default_rng(0).normal(size=(5, 3))
    post = variational_marginal(h, state)
    np.testing.assert_allclose(post.mean.numpy(), float(state.lm_bias), atol=1e-12)


def test_zero_variance_at_inducing_point():
    # S = 0 and C = 0: variance is A - A^2 / A = 0 exactly at the inducing point
    kern = KernelParams(outputscale=1.7, lengthscales=[0.9, 1.1], offset=0.0)
    z = np.array([[0.3, -0.2]])
    state = SgpAttentionState(z, [0.4], np.zeros((1, 1)), [0.0], [0.0, 0.0], 0.0, kern)
    post = variational_marginal(z, state)
    assert abs(float(post.variance[0])) < 1e-15
    assert float(post.mean[0]) == pytest.approx(0.4)


def test_diag_matches_full_diagonal():
    state = random_state(11, m=4, d=3)
    h = np.random.default_rng(5).uniform(-1, 1, (7, 3))
    full = variational_marginal(h, state, diag_only=False)
    diag = variational_marginal(h, state, diag_only=True)
    assert diag.covariance is None
    np.testing.assert_allclose(diag.variance.numpy(), torch.diagonal(full.covariance).numpy(), atol=1e-10)
    np.testing.assert_array_equal(diag.mean.numpy(), full.mean.numpy())


def test_variance_bounded_by_prior_when_s_below_kzz():
    state = with_prior_cov(random_state(2, m=8, d=3), scale=0.5)
    h = np.random.default_rng(9).uniform(-2, 2, (40, 3))
    post = variational_marginal(h, state)
    bound = float(state.kernel.outputscale + state.kernel.offset)
    assert torch.all(post.variance <= bound + 1e-8)
    assert torch.all(post.variance >= 0)


def test_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        variational_marginal(np.zeros((3, 5)), random_state(0, d=3))


def test_sample_zero_variance_rows_equal_mean(rng):
    post = AttentionPosterior(mean=torch.tensor([0.1, -2.0, 3.0], dtype=torch.float64),
                              variance=torch.zeros(3, dtype=torch.float64))
    a = sample_attention(post, 5, rng)
    assert torch.equal(a, post.mean.expand(5, 3))


def test_sample_law_of_large_numbers():
    post = AttentionPosterior(mean=torch.zeros(4, dtype=torch.float64), variance=torch.ones(4, dtype=torch.float64))
    n = 100_000
    a = sample_attention(post, n, np.random.default_rng(0)).numpy()
    assert np.all(np.abs(a.mean(axis=0)) < 4 / np.sqrt(n))
    assert np.all(np.abs(a.var(axis=0) - 1) < 0.05)


def test_sample_matches_recorded_noise():
    # PCG64(seed=7).standard_normal((2, 3)), recorded with a separate interpreter session
    eps = np.array([[0.0012301533574825742, 0.2987455375084699, -0.2741378553622176],
                    [-0.8905918387572742, -0.45467078517172255, -0.9916465549964624]])
    mean = np.array([0.5, -1.0, 2.0])
    var = np.array([0.25, 4.0, 0.0])
    post = AttentionPosterior(mean=torch.tensor(mean), variance=torch.tensor(var))
    a = sample_attention(post, 2, np.random.default_rng(7)).numpy()
    assert np.array_equal(a, mean + np.sqrt(var) * eps)


def test_sample_rejects_zero_samples(rng):
    post = AttentionPosterior(mean=torch.zeros(2, dtype=torch.float64), variance=torch.ones(2, dtype=torch.float64))
    with pytest.raises(InvalidArgumentError):
        sample_attention(post, 0, rng)


def test_sample_is_deterministic_given_seed():
    post = AttentionPosterior(mean=torch.zeros(3, dtype=torch.float64), variance=torch.ones(3, dtype=torch.float64))
    a = sample_attention(post, 4, np.random.default_rng(99))
    b = sample_attention(post, 4, np.random.default_rng(99))
    assert torch.equal(a, b)


def test_kl_zero_for_identical_gaussians():
    state = with_prior_cov(random_state(6, m=5))
    assert abs(float(kl_inducing(state))) < 1e-10


def test_kl_scalar_case():
    kern = KernelParams(outputscale=1.0, lengthscales=[1.0], offset=0.0)
    state = SgpAttentionState([[0.0]], [2.0], [[1.0]], [0.0], [0.0], 0.0, kern)
    assert float(kl_inducing(state)) == pytest.approx(2.0, abs=1e-12)


def test_kl_matches_closed_form_oracle():
    state = random_state(8, m=5)
    kzz = kernel_matrix(state.inducing_locations, state.inducing_locations, state.kernel).numpy()
    ref = oracles.kl_gauss(state.variational_mean.numpy(), state.variational_cov.numpy(),
                           state.prior_mean.numpy(), kzz)
    assert float(kl_inducing(state)) == pytest.approx(ref, rel=1e-9)


def test_kl_matches_monte_carlo():
    state = random_state(21, m=5)
    kzz = kernel_matrix(state.inducing_locations, state.inducing_locations, state.kernel).numpy()
    q = multivariate_normal(state.variational_mean.numpy(), state.variational_cov.numpy())
    p = multivariate_normal(state.prior_mean.numpy(), kzz)
    u = q.rvs(size=1_000_000, random_state=np.random.default_rng(0))
    diff = q.logpdf(u) - p.logpdf(u)
    se = diff.std(ddof=1) / np.sqrt(diff.size)
    assert abs(float(kl_inducing(state)) - diff.mean()) < 3 * se


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_kl_non_negative(seed):
    assert float(kl_inducing(random_state(seed, m=4))) >= -1e-10


def test_softmax_constant_row():
    out = normalize_attention(np.full((1, 4), 3.3), "softmax")
    np.testing.assert_allclose(out.numpy(), 0.25, atol=1e-15)


def test_sigmoid_values():
    out = normalize_attention(np.array([[0.0, -800.0]]), "sigmoid").numpy()
    assert out[0, 0] == 0.5
    assert out[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_reference_row():
    out = normalize_attention(np.array([[1.0, 2.0, 3.0]]), "softmax").numpy()[0]
    np.testing.assert_allclose(out, [0.090031, 0.244728, 0.665241], atol=1e-6)
    np.testing.assert_allclose(out, oracles.softmax_rows([1.0, 2.0, 3.0]), atol=1e-15)


def test_normalize_rejects_nan_and_unknown_mode():
    with pytest.raises(InvalidArgumentError):
        normalize_attention(np.array([[np.nan, 0.0]]), "softmax")
    with pytest.raises(InvalidArgumentError):
        normalize_attention(np.zeros((1, 2)), "relu")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12), st.integers(0, 11), st.floats(0.01, 5.0))
def test_normalization_rowsum_and_monotonicity(row, j, bump):
    j %= len(row)
    x = np.array([row])
    y = x.copy()
    y[0, j] += bump
    sm_x, sm_y = normalize_attention(x, "softmax"), normalize_attention(y, "softmax")
    assert abs(float(sm_x.sum()) - 1.0) < 1e-12
    assert float(sm_y[0, j]) >= float(sm_x[0, j])
    sg_x, sg_y = normalize_attention(x, "sigmoid"), normalize_attention(y, "sigmoid")
    assert float(sg_y[0, j]) >= float(sg_x[0, j])
    assert torch.all((sg_x >= 0) & (sg_x <= 1))


def test_module_state_is_positive_definite():
    mod = SgpAttention(3, 5, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        mod.raw_cov_factor.normal_(0, 3.0)
    state = mod.state()
    assert torch.all(torch.diagonal(state.variational_cov_factor) > 0)
    assert torch.allclose(state.variational_cov_factor, torch.tril(state.variational_cov_factor))
    assert float(torch.linalg.eigvalsh(state.variational_cov).min()) > 0


def test_module_initial_state():
    mod = SgpAttention(3, 4, generator=torch.Generator().manual_seed(0))
    state = mod.state()
    np.testing.assert_allclose(state.variational_cov_factor.detach().numpy(), 0.1 * np.eye(4), atol=1e-15)
    assert torch.equal(state.variational_mean, torch.zeros(4, dtype=torch.float64))
    assert torch.equal(state.prior_mean, torch.zeros(4, dtype=torch.float64))


def test_set_cov_factor_roundtrip():
    mod = SgpAttention(2, 3, generator=torch.Generator().manual_seed(0))
    factor = np.array([[0.5, 0, 0], [0.2, 0.7, 0], [-0.1, 0.3, 1.2]])
    mod.set_cov_factor(factor)
    np.testing.assert_allclose(mod.cov_factor().detach().numpy(), factor, atol=1e-12)
