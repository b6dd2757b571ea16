"""
Explicit unbiased-polynomial estimator for the two-block logit design.

With ``S = T/2`` periods at covariate 0 and ``S`` at covariate ``c``, the
data reduce to two binomial counts ``Y1 ~ Bin(S, p1)`` and
``Y2 ~ Bin(S, p2)``. The target ``Lambda(a1 + a2)`` becomes a smooth
function ``g_T(p1, p2)``; interpolating it at Chebyshev nodes and replacing
each monomial ``p^r`` by its unbiased estimator ``(Y)_r / (S)_r`` gives an
estimator whose bias is exactly the interpolation error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import mpmath
import numpy as np
from numpy.polynomial import polynomial as P
from scipy.special import expit, logit
from scipy.stats import binom

DEFAULT_EPS = 0.05
DOUBLE_MAX_S = 8
MP_DPS = 60


def chebyshev_nodes(S: int, eps: float = DEFAULT_EPS) -> np.ndarray:
    """``t_m = 1/2 + (1 - 2 eps)/2 * cos((2m + 1) pi / (2 (S + 1)))`` for ``m = 0..S``."""
    if S < 0:
        raise ValueError("S must be nonnegative")
    if not 0 <= eps < 0.5:
        raise ValueError("eps must lie in [0, 1/2)")
    m = np.arange(S + 1)
    return 0.5 + 0.5 * (1 - 2 * eps) * np.cos((2 * m + 1) * np.pi / (2 * (S + 1)))


def lagrange_coeffs(nodes: Sequence[float]) -> np.ndarray:
    """
    Monomial coefficients of the Lagrange basis polynomials.

    Returns
    -------
    numpy.ndarray
        ``c[m, s]`` is the coefficient of ``p**s`` in ``l_m(p)``.
    """
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.shape[0]
    c = np.zeros((n, n))
    for m in range(n):
        others = np.delete(nodes, m)
        num = P.polyfromroots(others) if n > 1 else np.ones(1)
        c[m] = num / np.prod(nodes[m] - others)
    return c


def _lagrange_coeffs_mp(nodes) -> list:
    n = len(nodes)
    out = []
    for m in range(n):
        poly = [mpmath.mpf(1)]
        denom = mpmath.mpf(1)
        for r in range(n):
            if r == m:
                continue
            # multiply by (p - t_r)
            nxt = [mpmath.mpf(0)] * (len(poly) + 1)
            for s, a in enumerate(poly):
                nxt[s] -= a * nodes[r]
                nxt[s + 1] += a
            poly = nxt
            denom *= nodes[m] - nodes[r]
        out.append([a / denom for a in poly])
    return out


def falling_factorial_ratio(y: int, r: int, n: int) -> float:
    """``(y)_r / (n)_r = prod_{i<r} (y - i) / (n - i)``; zero when ``y < r``."""
    if not (0 <= r <= n and 0 <= y <= n):
        raise ValueError(f"need 0 <= r <= n and 0 <= y <= n, got y={y}, r={r}, n={n}")
    out = 1.0
    for i in range(r):
        out *= (y - i) / (n - i)
    return out


def ratio_matrix(S: int) -> np.ndarray:
    """``R[y, r] = (y)_r / (S)_r`` for ``y, r = 0..S``."""
    R = np.zeros((S + 1, S + 1))
    R[:, 0] = 1.0
    y = np.arange(S + 1, dtype=float)
    for r in range(1, S + 1):
        R[:, r] = R[:, r - 1] * np.maximum(y - (r - 1), 0.0) / (S - (r - 1))
    return R


def g_T(p1, p2, T: float):
    """``Lambda((1 - sqrt T) logit p1 + sqrt T logit p2)``."""
    rt = math.sqrt(T)
    return expit((1 - rt) * logit(p1) + rt * logit(p2))


@dataclass(frozen=True, eq=False)
class ChebInterpolant:
    """
    Degree-``S`` Chebyshev interpolation on ``[eps, 1 - eps]`` together with
    the unbiased estimators of its Lagrange basis.

    ``precision='auto'`` switches to multiprecision arithmetic for the
    monomial expansion when ``S`` exceeds 8, where the double-precision
    conversion loses too many digits.
    """
    S: int
    eps: float = DEFAULT_EPS
    precision: str = 'auto'
    nodes: np.ndarray = field(init=False)
    coeffs: np.ndarray = field(init=False)
    L: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.precision not in ('auto', 'double', 'mp'):
            raise ValueError(f"unknown precision {self.precision!r}")
        nodes = chebyshev_nodes(self.S, self.eps)
        use_mp = self.precision == 'mp' or (self.precision == 'auto' and self.S > DOUBLE_MAX_S)
        if use_mp:
            coeffs, L = self._build_mp()
        else:
            coeffs = lagrange_coeffs(nodes)
            L = ratio_matrix(self.S) @ coeffs.T
        object.__setattr__(self, 'nodes', nodes)
        object.__setattr__(self, 'coeffs', coeffs)
        object.__setattr__(self, 'L', L)

    def _build_mp(self):
        with mpmath.workdps(MP_DPS):
            S = self.S
            c = (1 - 2 * mpmath.mpf(self.eps)) / 2
            nodes = [mpmath.mpf(1) / 2 + c * mpmath.cos((2 * m + 1) * mpmath.pi / (2 * (S + 1)))
                     for m in range(S + 1)]
            cm = _lagrange_coeffs_mp(nodes)
            L = np.empty((S + 1, S + 1))
            for y in range(S + 1):
                ratios = [mpmath.mpf(1)]
                for r in range(1, S + 1):
                    ratios.append(ratios[-1] * max(y - (r - 1), 0) / (S - (r - 1)))
                for m in range(S + 1):
                    L[y, m] = float(mpmath.fsum(a * b for a, b in zip(cm[m], ratios)))
            coeffs = np.array([[float(a) for a in row] for row in cm])
        return coeffs, L

    def basis(self, p) -> np.ndarray:
        """``l_m(p)`` for every node, shape ``(..., S+1)``."""
        p = np.asarray(p, dtype=float)
        t = self.nodes
        out = np.ones(p.shape + (t.size,))
        for m in range(t.size):
            for r in range(t.size):
                if r != m:
                    out[..., m] *= (p - t[r]) / (t[m] - t[r])
        return out

    def basis_from_coeffs(self, p) -> np.ndarray:
        """``l_m(p)`` evaluated from the monomial coefficients."""
        p = np.asarray(p, dtype=float)
        return np.stack([P.polyval(p, c) for c in self.coeffs], axis=-1)

    def unbiased_basis(self, y) -> np.ndarray:
        """``L_m(y) = sum_s c[m, s] (y)_s / (S)_s`` for every node."""
        return self.L[np.asarray(y, dtype=int)]

    def expected_basis(self, p) -> np.ndarray:
        """``E[L_m(Y)]`` for ``Y ~ Bin(S, p)``, shape ``(len(p), S+1)``."""
        p = np.atleast_1d(np.asarray(p, dtype=float))
        pmf = binom.pmf(np.arange(self.S + 1)[None, :], self.S, p[:, None])
        return pmf @ self.L


def _target_matrix(ci: ChebInterpolant, T: float, target: Optional[Callable]) -> np.ndarray:
    t = ci.nodes
    f = target if target is not None else (lambda a, b: g_T(a, b, T))
    return f(t[:, None], t[None, :]) * np.ones((t.size, t.size))


def m_T(y1: int, y2: int, T: int, eps: float = DEFAULT_EPS, interp: Optional[ChebInterpolant] = None,
        target: Optional[Callable] = None) -> float:
    """Unbiased-basis estimate ``sum_{m,l} g_T(t_m, t_l) L_m(y1) L_l(y2)``."""
    if T % 2:
        raise ValueError("T must be even")
    S = T // 2
    if not (0 <= y1 <= S and 0 <= y2 <= S):
        raise ValueError(f"counts must lie in 0..{S}")
    ci = interp if interp is not None else ChebInterpolant(S, eps)
    G = _target_matrix(ci, T, target)
    return float(ci.L[y1] @ G @ ci.L[y2])


def default_p_grid(eps: float = DEFAULT_EPS, n: int = 41) -> np.ndarray:
    """Symmetric ``n``-point grid on ``[eps, 1 - eps]``."""
    return np.linspace(eps, 1 - eps, n)


def bias_surface(T: int, eps: float = DEFAULT_EPS, p1=None, p2=None,
                 target: Optional[Callable] = None, precision: str = 'auto') -> np.ndarray:
    """
    Exact bias ``E[m_T(Y1, Y2)] - g(p1, p2)`` on the tensor grid ``p1 x p2``.

    The expectation sums over all ``(S+1)^2`` outcomes against the two
    binomial laws.
    """
    if T % 2:
        raise ValueError("T must be even")
    p1 = default_p_grid(eps) if p1 is None else np.asarray(p1, dtype=float)
    p2 = p1 if p2 is None else np.asarray(p2, dtype=float)
    if min(p1.min(), p2.min()) < eps - 1e-12 or max(p1.max(), p2.max()) > 1 - eps + 1e-12:
        raise ValueError("p grid must lie inside [eps, 1 - eps]")
    ci = ChebInterpolant(T // 2, eps, precision)
    G = _target_matrix(ci, T, target)
    E1 = ci.expected_basis(p1)
    E2 = ci.expected_basis(p2)
    mean = E1 @ G @ E2.T
    f = target if target is not None else (lambda a, b: g_T(a, b, T))
    return mean - f(p1[:, None], p2[None, :])


def exact_bias_surface(T: int, eps: float = DEFAULT_EPS, p_grid=None, target: Optional[Callable] = None,
                       precision: str = 'auto') -> float:
    """Sup-norm of :func:`bias_surface` over ``p_grid x p_grid``."""
    return float(np.max(np.abs(bias_surface(T, eps, p_grid, None, target, precision))))


@dataclass
class SweepResult:
    T: list
    sup_bias: list
    eps: float
    slope: float

    def rows(self) -> list:
        return [{'T': T, 'eps': self.eps, 'sup_bias': b, 'fitted_slope': self.slope}
                for T, b in zip(self.T, self.sup_bias)]


def sweep(T_list: Sequence[int] = (4, 8, 16, 24, 32), eps: float = DEFAULT_EPS, n_grid: int = 41,
          precision: str = 'auto') -> SweepResult:
    """Sup bias for each ``T`` and the least-squares slope of ``log(sup bias)`` on ``sqrt(T)``."""
    grid = default_p_grid(eps, n_grid)
    sups = [exact_bias_surface(int(T), eps, grid, precision=precision) for T in T_list]
    if len(T_list) >= 2:
        slope = float(np.polyfit(np.sqrt(np.asarray(T_list, dtype=float)), np.log(sups), 1)[0])
    else:
        slope = float('nan')
    return SweepResult([int(T) for T in T_list], sups, eps, slope)
