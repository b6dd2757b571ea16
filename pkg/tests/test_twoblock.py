import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose
from scipy.special import expit, logit
from scipy.stats import binom

from aoi.twoblock import (ChebInterpolant, bias_surface, chebyshev_nodes, default_p_grid, exact_bias_surface,
                          falling_factorial_ratio, g_T, lagrange_coeffs, m_T, ratio_matrix, sweep)

P_VALUES = [0.1, 0.3, 0.5, 0.7, 0.9]


def test_chebyshev_node_examples():
    assert_allclose(chebyshev_nodes(0, 0.2), [0.5], atol=1e-16)
    assert_allclose(chebyshev_nodes(1, 0.0), [0.5 + math.sqrt(2) / 4, 0.5 - math.sqrt(2) / 4], atol=1e-15)
    t = chebyshev_nodes(15, 0.05)
    assert t.size == 16
    assert np.all((t > 0.05) & (t < 0.95))
    assert np.all(np.diff(t) < 0)


@pytest.mark.parametrize('eps', [-0.1, 0.5, 0.7])
def test_chebyshev_rejects_bad_eps(eps):
    with pytest.raises(ValueError):
        chebyshev_nodes(3, eps)


def test_lagrange_coeff_examples():
    assert_allclose(lagrange_coeffs([0.0, 1.0]), [[1, -1], [0, 1]], atol=1e-15)
    c = lagrange_coeffs([0.0, 0.5, 1.0])
    assert_allclose(c[1], [0, 4, -4], atol=1e-14)


@given(st.integers(0, 10), st.floats(0, 0.45))
def test_lagrange_basis_is_cardinal(S, eps):
    ci = ChebInterpolant(S, eps)
    assert_allclose(ci.basis(ci.nodes), np.eye(S + 1), atol=1e-9)
    p = np.linspace(0, 1, 7)
    assert_allclose(ci.basis(p).sum(axis=-1), 1.0, atol=1e-9)


def test_falling_factorial_examples():
    assert falling_factorial_ratio(3, 0, 7) == 1.0
    for r in range(6):
        assert falling_factorial_ratio(5, r, 5) == 1.0
    assert falling_factorial_ratio(1, 2, 4) == 0.0
    pmf = binom.pmf(np.arange(4), 3, 0.4)
    assert sum(pmf[y] * falling_factorial_ratio(y, 2, 3) for y in range(4)) == pytest.approx(0.16, abs=1e-15)
    with pytest.raises(ValueError):
        falling_factorial_ratio(2, 4, 3)


@given(st.integers(1, 25), st.floats(0, 1))
def test_falling_factorial_unbiased_for_powers(S, p):
    R = ratio_matrix(S)
    pmf = binom.pmf(np.arange(S + 1), S, p)
    assert_allclose(pmf @ R, p ** np.arange(S + 1), atol=1e-12)


def test_g_T_examples():
    assert g_T(0.2, 0.7, 1) == pytest.approx(0.7, abs=1e-15)
    assert g_T(0.3, 0.6, 4) == pytest.approx(expit(-logit(0.3) + 2 * logit(0.6)), abs=1e-15)


@given(st.floats(0.001, 0.999), st.integers(1, 200))
def test_g_T_on_diagonal(p, T):
    assert g_T(p, p, T) == pytest.approx(p, abs=1e-14)


def test_m_T_bilinear_at_S1():
    T, ci = 2, ChebInterpolant(1, 0.05)
    t = ci.nodes
    G = g_T(t[:, None], t[None, :], T)
    # L_m(y) for S = 1 is the Lagrange basis evaluated at y itself
    L = lambda y: ci.basis(float(y))
    for y1 in range(2):
        for y2 in range(2):
            oracle = sum(G[m, l] * L(y1)[m] * L(y2)[l] for m in range(2) for l in range(2))
            assert m_T(y1, y2, T) == pytest.approx(oracle, abs=1e-14)


def test_m_T_input_checks():
    with pytest.raises(ValueError):
        m_T(0, 0, 3)
    with pytest.raises(ValueError):
        m_T(3, 0, 4)


@pytest.mark.parametrize('S', range(0, 11))
def test_unbiased_basis_expectation(S):
    ci = ChebInterpolant(S)
    assert_allclose(ci.expected_basis(P_VALUES), ci.basis(P_VALUES), atol=1e-8)


@pytest.mark.parametrize('S', [12, 15])
def test_multiprecision_path_keeps_unbiasedness(S):
    ci = ChebInterpolant(S)
    assert_allclose(ci.expected_basis(P_VALUES), ci.basis(P_VALUES), atol=1e-10)


def test_double_and_mp_paths_agree_at_moderate_S():
    a, b = ChebInterpolant(8, precision='double'), ChebInterpolant(8, precision='mp')
    assert_allclose(a.L, b.L, atol=1e-8)
    assert_allclose(a.basis_from_coeffs(P_VALUES), a.basis(P_VALUES), atol=1e-10)


def test_constant_target_has_zero_bias():
    assert exact_bias_surface(2, 0.05, target=lambda a, b: 0.37 + 0 * a * b) < 1e-14


@pytest.mark.parametrize('T', [2, 6, 12, 20])
def test_polynomial_targets_interpolated_exactly(T):
    S = T // 2
    rng = np.random.default_rng(T)
    C = rng.normal(size=(S + 1, S + 1))
    target = lambda a, b: np.polynomial.polynomial.polyval2d(*np.broadcast_arrays(a, b), C)
    assert exact_bias_surface(T, 0.05, target=target) < 1e-8


def test_bias_decreases_from_T4_to_T16():
    assert exact_bias_surface(16, 0.1) < exact_bias_surface(4, 0.1)


@pytest.mark.parametrize('T', [4, 10, 16])
def test_reflection_invariance(T):
    grid = np.linspace(0.05, 0.95, 13)
    B = bias_surface(T, 0.05, grid, grid)
    assert_allclose(B[::-1, ::-1], -B, atol=1e-10)
    assert np.max(np.abs(B[::-1, ::-1])) == pytest.approx(np.max(np.abs(B)), abs=1e-10)


def test_bias_grid_must_lie_in_band():
    with pytest.raises(ValueError):
        bias_surface(4, 0.1, np.array([0.05, 0.5]))


def test_sweep_slope_negative():
    res = sweep()
    assert res.T == [4, 8, 16, 24, 32]
    assert res.slope < 0
    assert res.sup_bias[-1] < res.sup_bias[0]
    rows = res.rows()
    assert len(rows) == 5 and rows[0]['fitted_slope'] == res.slope
    assert default_p_grid(0.05).size == 41
