import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import expit, logit
from scipy.stats import ortho_group

from aoi.discretize import FixedEffectGrid, point_grid, quantile_grid, normal, product_grid
from aoi.estimator import (LikelihoodKernel, MemoryBudgetExceeded, NO_REG, Regularization, SpectralTransition,
                           ZeroPredictive, accumulate_transition, aoi_estimate, aoi_estimates, apply_regularization,
                           build_kernel, estimating_function, estimating_functions, posterior, posterior_means,
                           prior_predictive, report_from_influences, spectral_transition, spectral_weights,
                           transition_from_gram, unit_influences, z_value)
from aoi.model import (StaticLogit, UnknownOutcome, binomial_nocov_model, effect_constant, effect_counterfactual_prob,
                       rc_binary_model, two_block_design)

from conftest import random_kernel

seeds = st.integers(0, 2 ** 31)


def instance(seed, n_Y=None, K=None, equal_mass=True):
    rng = np.random.default_rng(seed)
    n_Y = n_Y or int(rng.integers(2, 17))
    K = K or int(rng.integers(n_Y, 3 * n_Y + 1))
    kern = random_kernel(rng, n_Y, K, equal_mass)
    mu = rng.normal(size=K)
    return kern, mu, posterior_means(kern, mu)


def recursion_oracle(kern, m, q):
    """Iterate w <- w - (posterior-averaged bias of w) starting from the plug-in."""
    F, pi = kern.F, kern.grid.masses
    post = (F * pi).T / (F @ pi)          # post[k, y] = P(alpha_k | y)
    w = m.copy()
    for _ in range(q):
        bias = post.T @ (F.T @ w) - m     # E_post[ E_alpha[w(Y)] - mu(alpha) ]
        w = w - bias
    return w


# ---------------------------------------------------------------------------
# kernels, predictive, posterior

def test_build_kernel_examples():
    k1 = build_kernel(binomial_nocov_model(1), None, point_grid([0.0]))
    assert_allclose(k1.F, [[0.5], [0.5]])
    k2 = build_kernel(binomial_nocov_model(2), None, point_grid([logit(0.4)]))
    assert_allclose(k2.F[:, 0], [0.36, 0.48, 0.16], rtol=1e-13)


def test_build_kernel_memory_budget():
    with pytest.raises(MemoryBudgetExceeded):
        build_kernel(rc_binary_model(8, collapse=False), np.arange(8.0),
                     product_grid(quantile_grid(normal(), 99), quantile_grid(normal(), 99)), memory_budget=2 ** 20)


def test_prior_predictive_examples():
    F = np.array([[0.2, 0.6], [0.8, 0.4]])
    g = FixedEffectGrid([0.0, 1.0], [0.5, 0.5])
    assert_allclose(prior_predictive(LikelihoodKernel(F[:, :1], None, None, point_grid([0.0]))), F[:, 0])
    assert_allclose(prior_predictive(LikelihoodKernel(F, None, None, g)), F.mean(axis=1))


def test_posterior_examples():
    F = np.array([[0.3, 0.3], [0.7, 0.7]])
    g = FixedEffectGrid([0.0, 1.0], [0.5, 0.5])
    assert_allclose(posterior(LikelihoodKernel(F, None, None, g), k=0), [0.5, 0.5])
    model = binomial_nocov_model(2)
    grid = FixedEffectGrid([logit(0.3), logit(0.7)], [0.5, 0.5])
    kern = build_kernel(model, None, grid)
    assert_allclose(posterior(kern, k=2), np.array([0.09, 0.49]) / 0.58, rtol=1e-12)
    single = LikelihoodKernel(F[:, :1], None, None, point_grid([0.0]))
    for k in range(2):
        assert_allclose(posterior(single, k=k), [1.0])


def test_zero_predictive_detected():
    kern = build_kernel(binomial_nocov_model(1), None, point_grid([800.0]))
    with pytest.raises(ZeroPredictive) as info:
        prior_predictive(kern)
    assert info.value.k == 0


# ---------------------------------------------------------------------------
# spectral transition

def test_single_grid_point_is_rank_one():
    kern = build_kernel(rc_binary_model(4, collapse=False), np.array([0.1, -0.5, 1.0, 0.3]), point_grid([0.2, 0.7]))
    st_ = spectral_transition(kern)
    assert st_.eigenvalues[0] == pytest.approx(1.0, abs=1e-12)
    assert_allclose(st_.eigenvalues[1:], 0.0, atol=1e-12)


@given(seeds)
def test_generic_full_rank_spectrum_in_unit_interval(seed):
    kern, _, _ = instance(seed)
    lam = spectral_transition(kern).eigenvalues
    assert lam[0] == pytest.approx(1.0, abs=1e-9)
    assert np.all(lam > 0) and np.all(lam <= 1)


@given(seeds, st.booleans())
@pytest.mark.filterwarnings('error::RuntimeWarning')
def test_raw_eigenvalues_and_column_stochastic(seed, equal_mass):
    kern, _, _ = instance(seed, equal_mass=equal_mass)
    st_ = spectral_transition(kern)
    assert st_.raw_eigenvalues.max() <= 1 + 1e-9 and st_.raw_eigenvalues.min() >= -1e-9
    Q = st_.q_matrix()
    assert_allclose(Q.sum(axis=0), 1.0, atol=1e-9)
    assert Q.min() >= -1e-9
    # stationary distribution is the prior predictive
    assert_allclose(Q @ st_.p, st_.p, atol=1e-12)


def test_streamed_transition_matches_dense():
    model = rc_binary_model(6)
    x = two_block_design(6, 0.7)
    grid = product_grid(quantile_grid(normal(0, 1), 9), quantile_grid(normal(1, 2), 7))
    dense = spectral_transition(build_kernel(model, x, grid))
    e = effect_counterfactual_prob(1.0)
    streamed, (m,) = accumulate_transition(model, x, grid, [e], block_size=5)
    assert_allclose(streamed.eigenvalues, dense.eigenvalues, atol=1e-13)
    assert_allclose(streamed.q_matrix(), dense.q_matrix(), atol=1e-12)
    assert_allclose(m, posterior_means(build_kernel(model, x, grid), e.evaluate(x, grid.points)), rtol=1e-12)


def test_eigenvalue_excursion_warns():
    p = np.array([0.5, 0.5])
    with pytest.warns(RuntimeWarning):
        transition_from_gram(p, np.array([[0.6, 0.0], [0.0, 0.25]]))


# ---------------------------------------------------------------------------
# regularization and weights

@pytest.mark.parametrize('reg, expected', [
    (Regularization('truncate', 1e-4), [0.9, 0.0]),
    (Regularization('clamp', 1e-4), [0.9, 1e-4]),
    (NO_REG, [0.9, 5e-5]),
])
def test_apply_regularization_examples(reg, expected):
    assert_array_equal(apply_regularization(np.array([0.9, 5e-5]), reg), expected)


@pytest.mark.parametrize('mode', ['truncate', 'clamp'])
def test_regularization_leaves_large_eigenvalues(mode):
    assert_array_equal(apply_regularization(np.array([0.9, 0.5]), Regularization(mode, 1e-4)), [0.9, 0.5])


def test_regularization_parse_and_validate():
    assert Regularization.parse('clamp@1e-3') == Regularization('clamp', 1e-3)
    assert Regularization.parse({'mode': 'truncate', 'lambda_min': 1e-4}) == Regularization('truncate', 1e-4)
    assert Regularization.parse(None) == NO_REG
    assert str(Regularization('clamp', 1e-4)) == 'clamp@0.0001'
    with pytest.raises(ValueError):
        Regularization('shrink', 1e-4)
    with pytest.raises(ValueError):
        Regularization('clamp', 0.0)


def test_spectral_weights_closed_form():
    lam = np.array([1.0, 0.5, 0.1, 0.0])
    assert_allclose(spectral_weights(lam, 0), 1.0)
    assert_allclose(spectral_weights(lam, 2), [1.0, 1.75, 1 + 0.9 + 0.81, 3.0])
    assert_allclose(spectral_weights(lam, math.inf), [1.0, 2.0, 10.0, 0.0])
    trunc = spectral_weights(np.array([0.5, 5e-5]), 3, Regularization('truncate', 1e-4))
    assert_allclose(trunc, [1.875, 4.0])
    with pytest.raises(ValueError):
        spectral_weights(lam, 1.5)


@given(st.floats(1e-12, 1.0), st.integers(0, 10 ** 7))
def test_spectral_weights_bounded_by_both_limits(lam, q):
    s = spectral_weights(np.array([lam]), q)[0]
    assert 1.0 - 1e-12 <= s <= min(q + 1, 1 / lam) * (1 + 1e-12)


# ---------------------------------------------------------------------------
# estimating functions

def test_q0_is_plug_in():
    kern, _, m = instance(3)
    st_ = spectral_transition(kern)
    assert_array_equal(estimating_function(st_, m, 0).w, m)


def test_single_grid_point_constant_for_all_q():
    model = rc_binary_model(4)
    x = two_block_design(4, 1.0)
    grid = point_grid([0.3, -0.4])
    e = effect_counterfactual_prob(1.0)
    st_, (m,) = accumulate_transition(model, x, grid, [e])
    mu = e.evaluate(x, grid.points)[0]
    for q in (0, 1, 5, 1000, math.inf):
        assert_allclose(estimating_function(st_, m, q).w, mu, rtol=1e-12)


def test_q3_matches_dense_recursion_four_outcomes():
    kern, _, m = instance(11, n_Y=4, K=6)
    st_ = spectral_transition(kern)
    assert_allclose(estimating_function(st_, m, 3).w, recursion_oracle(kern, m, 3), atol=1e-12)


@given(seeds, st.integers(0, 50))
def test_spectral_form_equals_recursion(seed, q):
    kern, _, m = instance(seed)
    st_ = spectral_transition(kern)
    w = estimating_function(st_, m, q).w
    oracle = recursion_oracle(kern, m, q)
    assert np.max(np.abs(w - oracle)) <= 1e-10 * max(1.0, np.max(np.abs(oracle)))


@given(seeds)
def test_drazin_identities(seed):
    kern, _, m = instance(seed, K=None)
    st_ = spectral_transition(kern)
    Q = st_.q_matrix()
    D = st_.drazin()
    assert_allclose(D @ Q @ D, D, atol=1e-8 * max(1, np.abs(D).max()))
    assert_allclose(Q @ D, D @ Q, atol=1e-8 * max(1, np.abs(D).max()))
    assert_allclose(Q @ D @ Q, Q, atol=1e-8)
    assert_allclose(estimating_function(st_, m, math.inf).w, D.T @ m, atol=1e-8 * max(1, np.abs(D).max()))


@given(seeds)
def test_drazin_on_rank_deficient_kernel(seed):
    rng = np.random.default_rng(seed)
    n_Y = int(rng.integers(4, 13))
    kern = random_kernel(rng, n_Y, int(rng.integers(1, n_Y)))
    st_ = spectral_transition(kern)
    Q, D = st_.q_matrix(), st_.drazin()
    scale = max(1.0, np.abs(D).max())
    assert_allclose(D @ Q @ D, D, atol=1e-8 * scale)
    assert_allclose(Q @ D @ Q, Q, atol=1e-8 * scale)


@pytest.mark.parametrize('seed', range(8))
def test_corrections_converge_monotonically(seed):
    kern, _, m = instance(seed, n_Y=6, K=12)
    st_ = spectral_transition(kern)
    assert st_.eigenvalues[-1] > 1e-3
    w_inf = estimating_function(st_, m, math.inf).w
    qs = np.arange(0, 300)
    diffs = [estimating_function(st_, m, q).w - w_inf for q in qs]
    gaps = np.array([np.max(np.abs(d)) for d in diffs])
    # every spectral component shrinks by (1 - lam) per step, so the p-weighted norm is monotone
    weighted = np.array([np.linalg.norm(np.sqrt(st_.p) * d) for d in diffs])
    assert np.all(np.diff(weighted) <= 1e-12)
    # w_q - w_inf = -P^-1/2 U diag((1-lam)^(q+1)/lam) a, so the gap has a summable geometric envelope
    lam = st_.eigenvalues
    a = (np.sqrt(st_.p) * m) @ st_.eigvecs
    envelope = np.linalg.norm(a / lam) / np.sqrt(st_.p.min()) * (1 - lam[-1]) ** (qs + 1)
    assert np.all(gaps <= envelope * (1 + 1e-9) + 1e-12)


def test_large_q_is_stable():
    kern, _, m = instance(5)
    st_ = spectral_transition(kern)
    reg = Regularization('clamp', 1e-4)
    w_big = estimating_function(st_, m, 10 ** 6, reg).w
    w_inf = estimating_function(st_, m, math.inf, reg).w
    assert np.all(np.isfinite(w_big))
    assert_allclose(w_big, w_inf, rtol=1e-9, atol=1e-12)


@given(seeds)
def test_permutation_equivariance(seed):
    kern, mu, m = instance(seed)
    perm = np.random.default_rng(seed + 1).permutation(kern.F.shape[0])
    kp = LikelihoodKernel(kern.F[perm], None, None, kern.grid)
    for q in (0, 2, math.inf):
        w = estimating_function(spectral_transition(kern), m, q).w
        wp = estimating_function(spectral_transition(kp), posterior_means(kp, mu), q).w
        assert_allclose(wp, w[perm], rtol=1e-8, atol=1e-8)


@given(seeds)
def test_invariant_to_basis_of_degenerate_eigenspace(seed):
    rng = np.random.default_rng(seed)
    n_Y = int(rng.integers(3, 10))
    K = int(rng.integers(1, n_Y))
    kern = random_kernel(rng, n_Y, K)
    m = posterior_means(kern, rng.normal(size=K))
    st_ = spectral_transition(kern)
    U = st_.eigvecs.copy()
    null = slice(K, n_Y)
    U[:, null] = U[:, null] @ ortho_group.rvs(n_Y - K, random_state=rng) if n_Y - K > 1 else -U[:, null]
    rotated = SpectralTransition(st_.p, st_.eigenvalues, U, st_.raw_eigenvalues)
    for q in (1, 7, math.inf):
        assert_allclose(estimating_function(rotated, m, q).w, estimating_function(st_, m, q).w, atol=1e-9)


def test_estimating_functions_share_projection():
    kern, _, m = instance(8)
    st_ = spectral_transition(kern)
    many = estimating_functions(st_, m, [0, 4, math.inf])
    for q, ef in many.items():
        assert_array_equal(ef.w, estimating_function(st_, m, q).w)


# ---------------------------------------------------------------------------
# the estimator

def small_problem():
    model = rc_binary_model(4)
    grid = product_grid(quantile_grid(normal(0, 1), 9), quantile_grid(normal(1, 1), 9))
    rng = np.random.default_rng(0)
    X = rng.normal(size=(12, 4))
    Y = (rng.random((12, 4)) < 0.5).astype(int)
    return model, grid, Y, X


def test_single_unit():
    model, grid, Y, X = small_problem()
    e = effect_counterfactual_prob(1.0)
    rep = aoi_estimate([(Y[0], X[0])], model, grid, e)
    st_, (m,) = accumulate_transition(model, X[0], grid, [e])
    w = estimating_function(st_, m).w
    assert rep.estimate == w[model.outcome_space(X[0]).index_of(Y[0])]
    assert rep.sigma2_hat == 0 and rep.se == 0
    assert rep.ci == (rep.estimate, rep.estimate)


def test_identical_units_have_zero_se():
    model, grid, Y, X = small_problem()
    rep = aoi_estimate([(Y[1], X[1])] * 7, model, grid, effect_counterfactual_prob(0.0), q=2)
    assert rep.se == 0 and rep.ci[0] == rep.ci[1] == rep.estimate
    assert rep.n == 7


def test_report_metadata_and_summary():
    model, grid, Y, X = small_problem()
    reps = aoi_estimates((Y, X), model, grid, effect_counterfactual_prob(1.0), qs=[0, math.inf],
                         reg=Regularization('clamp', 1e-4))
    r = reps[math.inf]
    assert r.metadata == {'q': math.inf, 'regularization': 'clamp@0.0001', 'grid_size': 81,
                          'model': 'rc_binary', 'effect': 'cf_prob:1', 'T': 4}
    assert 'estimate=' in r.summary()
    assert r.ci[0] < r.estimate < r.ci[1]


def test_workers_do_not_change_results():
    model, grid, Y, X = small_problem()
    a = aoi_estimate((Y, X), model, grid, effect_counterfactual_prob(1.0), workers=1)
    b = aoi_estimate((Y, X), model, grid, effect_counterfactual_prob(1.0), workers=3)
    assert_array_equal(a.influences, b.influences)
    assert a.estimate == b.estimate and a.se == b.se


def test_unit_errors_name_the_unit():
    model = StaticLogit(1, [1.0])
    grid = point_grid([800.0])
    with pytest.raises(ZeroPredictive) as info:
        aoi_estimate([([1], [[0.0]]), ([0], [[2.0]])], model, grid, effect_constant(1.0))
    assert info.value.unit == 0
    model, grid, Y, X = small_problem()
    with pytest.raises(UnknownOutcome, match='unit 1'):
        aoi_estimate([(Y[0], X[0]), ([0, 1, 2, 0], X[1])], model, grid, effect_constant(1.0))


def test_constant_effect_is_recovered_exactly():
    model, grid, Y, X = small_problem()
    infl = unit_influences(model, list(Y), list(X), grid, [effect_constant(0.3)], [0, 3])
    assert_allclose(infl, 0.3, atol=1e-10)
    # the unregularized inverse amplifies roundoff along near-null directions; clamping removes that
    infl = unit_influences(model, list(Y), list(X), grid, [effect_constant(0.3)], [math.inf],
                           Regularization('clamp', 1e-4))
    assert_allclose(infl, 0.3, atol=1e-10)


def test_variance_formula():
    r = report_from_influences(np.array([1.0, 2.0, 3.0, 6.0]))
    assert r.estimate == 3.0
    assert r.sigma2_hat == pytest.approx(3.5)
    assert r.se == pytest.approx(math.sqrt(3.5 / 4))
    assert z_value(0.9) == pytest.approx(1.6448536269514722)
    with pytest.raises(ValueError):
        report_from_influences(np.array([]))
