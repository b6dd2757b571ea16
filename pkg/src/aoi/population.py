"""
Exact (infinite-sample) analysis of estimating functions on finite designs.

Because every estimator here is a sample mean of ``w(Y_i, X_i)``, its bias
is ``E_0[w(Y, X)] - mu_0`` and its variance is ``Var_0[w(Y, X)] / n`` exactly
for every ``n``. The true law is itself discretized on a grid, so the results
are exact conditional on that discretization.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.linalg
from scipy.special import expit

from .discretize import FixedEffectGrid, normal, logistic, product_grid, quantile_grid
from .estimator import (NO_REG, EstimatingFunction, Regularization, accumulate_transition,
                        estimating_functions, iter_kernel_blocks)
from .model import (BinaryPanelModel, BinomialNoCov, EffectFunctional, effect_counterfactual_prob,
                    rc_binary_model, two_block_design)

GridLike = Union[FixedEffectGrid, Callable[[object], FixedEffectGrid]]


class NonUniformPrior(ValueError):
    """The projection-residual bias identity needs an equal-mass prior grid."""


@dataclass
class DesignSpec:
    """
    Finite covariate design with the true fixed-effect law at each point.

    Parameters
    ----------
    support : list of (x, probability)
    truth_grid : FixedEffectGrid or callable
        Discretized true distribution; a callable receives ``x``.
    """
    support: list
    truth_grid: GridLike

    def __post_init__(self):
        if not self.support:
            raise ValueError("design support is empty")
        total = math.fsum(float(d) for _, d in self.support)
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"design probabilities sum to {total!r}, not 1")
        if any(float(d) < 0 for _, d in self.support):
            raise ValueError("design probabilities must be nonnegative")

    def truth_at(self, x) -> FixedEffectGrid:
        g = self.truth_grid
        return g if isinstance(g, FixedEffectGrid) else g(x)

    @classmethod
    def single(cls, x, truth_grid: GridLike) -> 'DesignSpec':
        return cls([(x, 1.0)], truth_grid)


@dataclass
class PopulationAnalysis:
    mu0: float
    bias: float
    asd: float
    thm1_bias: Optional[float] = None
    residual_norms: Optional[tuple] = None
    cs_bound: Optional[float] = None
    metadata: dict = field(default_factory=dict)


def truth_moments(model: BinaryPanelModel, x, truth: FixedEffectGrid, effect: EffectFunctional,
                  block_size: Optional[int] = None) -> tuple:
    """
    True outcome-label distribution ``P0(.|x)`` and conditional mean of the effect.
    """
    space = model.outcome_space(x)
    P0 = np.zeros(space.n)
    parts = []
    for sl, F in iter_kernel_blocks(model, x, truth, block_size, space):
        mass = truth.masses[sl]
        P0 += F @ mass
        parts.append(math.fsum(effect.evaluate(x, truth.points[sl]) * mass))
    return P0, math.fsum(parts)


def _moments(w_by_x: Sequence[np.ndarray], truths: Sequence[tuple], probs: Sequence[float]) -> tuple:
    mu0 = math.fsum(d * mx for d, (_, mx) in zip(probs, truths))
    mean_w = math.fsum(d * math.fsum(w * P0) for d, w, (P0, _) in zip(probs, w_by_x, truths))
    var = math.fsum(d * math.fsum(P0 * (w - mean_w) ** 2) for d, w, (P0, _) in zip(probs, w_by_x, truths))
    return mu0, mean_w - mu0, math.sqrt(max(var, 0.0))


def population_moments(w_by_x: Sequence, design: DesignSpec, model: BinaryPanelModel,
                       effect: EffectFunctional, truths: Optional[Sequence[tuple]] = None) -> PopulationAnalysis:
    """
    True average effect, bias and per-observation standard deviation of ``w``.

    Parameters
    ----------
    w_by_x : sequence of EstimatingFunction or numpy.ndarray
        One estimating function per design support point, in order.
    design : DesignSpec
    model, effect
        Define the truth through ``design.truth_grid``.
    truths : sequence of (P0, mu0_x), optional
        Precomputed :func:`truth_moments`, one per support point.

    Returns
    -------
    PopulationAnalysis
    """
    if len(w_by_x) != len(design.support):
        raise ValueError("need exactly one estimating function per design support point")
    ws = [np.asarray(w.w if isinstance(w, EstimatingFunction) else w, dtype=float) for w in w_by_x]
    if truths is None:
        truths = [truth_moments(model, x, design.truth_at(x), effect) for x, _ in design.support]
    for (x, _), w, (P0, _) in zip(design.support, ws, truths):
        if w.shape != P0.shape:
            raise ValueError(f"estimating function has {w.shape[0]} entries but the outcome space "
                             f"at this covariate value has {P0.shape[0]}")
    probs = [float(d) for _, d in design.support]
    mu0, bias, asd = _moments(ws, truths, probs)
    return PopulationAnalysis(mu0, bias, asd)


# ---------------------------------------------------------------------------
# projection-residual identity
# ---------------------------------------------------------------------------

def _row_space_basis(F: np.ndarray, rtol: Optional[float] = None) -> np.ndarray:
    """Orthonormal basis (K, r) of the span of the rows of ``F`` via pivoted QR."""
    Qm, R, _ = scipy.linalg.qr(F.T, mode='economic', pivoting=True)
    d = np.abs(np.diag(R))
    if d.size == 0 or d[0] == 0:
        return Qm[:, :0]
    if rtol is None:
        rtol = max(F.shape) * np.finfo(float).eps * 10
    r = int(np.sum(d > rtol * d[0]))
    return Qm[:, :r]


def theorem1_bias(F: np.ndarray, prior_grid: FixedEffectGrid, truth_values: np.ndarray,
                  effect_values: np.ndarray) -> tuple:
    """
    Bias of the limit estimator as minus the inner product of two residuals.

    With an equal-mass prior the discrete space of functions on the grid
    carries the inner product ``<a, b> = mean(a * b)``. ``mu_perp`` is the
    residual of the effect values after projecting on the row space of
    ``F``; ``pi_perp`` the residual of the truth density (relative to the
    prior) after projecting on the same space.

    Parameters
    ----------
    F : (n_Y, K) kernel on the prior grid
    prior_grid : FixedEffectGrid, equal-mass
    truth_values : (K,) truth density w.r.t. the grid's uniform measure (masses * K)
    effect_values : (K,)

    Returns
    -------
    thm1_bias : float
    residual_norms : (float, float)
    cs_bound : float
    """
    if not prior_grid.equal_mass:
        raise NonUniformPrior("the prior grid must have equal masses; apply uniformize() first")
    K = prior_grid.K
    B = _row_space_basis(np.asarray(F, dtype=float))

    def resid(v):
        v = np.asarray(v, dtype=float)
        return v - B @ (B.T @ v)

    mu_perp = resid(effect_values)
    pi_perp = resid(truth_values)
    ip = math.fsum(mu_perp * pi_perp) / K
    n_mu = math.sqrt(math.fsum(mu_perp ** 2) / K)
    n_pi = math.sqrt(math.fsum(pi_perp ** 2) / K)
    return -ip, (n_mu, n_pi), n_mu * n_pi


def truth_density_on(prior_grid: FixedEffectGrid, truth_grid: FixedEffectGrid) -> np.ndarray:
    """Truth masses times ``K`` when the truth lives on the prior grid's points."""
    if truth_grid.K != prior_grid.K or not np.array_equal(truth_grid.points, prior_grid.points):
        raise ValueError("truth grid does not share the prior grid's support")
    return truth_grid.masses * prior_grid.K


# ---------------------------------------------------------------------------
# full exact analysis
# ---------------------------------------------------------------------------

def exact_analysis(model: BinaryPanelModel, design: DesignSpec, prior_grid: GridLike,
                   effect: EffectFunctional, qs: Sequence[float] = (math.inf,),
                   reg: Regularization = NO_REG, residuals: bool = False,
                   block_size: Optional[int] = None) -> dict:
    """
    Population bias and s.d. of the order-``q`` estimators for every ``q``.

    Kernels are streamed in column blocks, so grids with millions of
    points are fine. With ``residuals=True`` (small grids only, truth on the
    prior's support) the projection-residual quantities are filled in too,
    aggregated over the design.

    Returns
    -------
    dict
        ``q -> PopulationAnalysis``
    """
    qs = list(qs)
    probs = [float(d) for _, d in design.support]
    truths, fns = [], []
    t1 = [0.0, 0.0, 0.0, 0.0]
    for x, d in design.support:
        prior = prior_grid if isinstance(prior_grid, FixedEffectGrid) else prior_grid(x)
        truth = design.truth_at(x)
        st, (m,) = accumulate_transition(model, x, prior, [effect], block_size)
        fns.append(estimating_functions(st, m, qs, reg))
        truths.append(truth_moments(model, x, truth, effect, block_size))
        if residuals:
            F = model.kernel(x, prior.points)
            b, (nm, npi), _ = theorem1_bias(F, prior, truth_density_on(prior, truth),
                                            effect.evaluate(x, prior.points))
            t1[0] += d * b
            t1[1] += d * nm ** 2
            t1[2] += d * npi ** 2
            t1[3] += d * nm * npi
    out = {}
    for q in qs:
        mu0, bias, asd = _moments([f[q].w for f in fns], truths, probs)
        pa = PopulationAnalysis(mu0, bias, asd, metadata={'q': q, 'reg': str(reg)})
        if residuals:
            pa.thm1_bias = t1[0]
            pa.residual_norms = (math.sqrt(t1[1]), math.sqrt(t1[2]))
            pa.cs_bound = t1[3]
        out[q] = pa
    return out


# ---------------------------------------------------------------------------
# the two-block scenarios and sweeps
# ---------------------------------------------------------------------------

SCENARIO_SLOPES = {
    1: lambda T: 1.0,
    2: lambda T: 0.5,
    3: lambda T: 1.0 / math.sqrt(T),
}
TRUTH_LOCATION, TRUTH_SCALE = 1.0, 0.5
PRIOR_VARIANCE = 4 * math.pi ** 2 / 3


@dataclass
class Scenario:
    """Everything needed for an exact analysis at one ``T``."""
    model: BinaryPanelModel
    design: DesignSpec
    prior_grid: GridLike
    effect: EffectFunctional
    label: str = ''


def two_block_scenario(number: int, T: int, K: int = 1000, rule='k+1',
                       truth_grids: Optional[tuple] = None) -> Scenario:
    """
    Two-block design with slope ``c_T`` on the second half: ``c_T = 1``
    (scenario 1), ``1/2`` (scenario 2) or ``1/sqrt(T)`` (scenario 3).

    The truth is a product of logistic(1, 1/2) laws, the prior a product of
    mean-zero normals with variance ``4 pi^2 / 3``, both on ``K``-point
    quantile grids per dimension; the target is ``E[Lambda(A1 + A2)]``.
    """
    if number not in SCENARIO_SLOPES:
        raise ValueError(f"scenario must be one of {sorted(SCENARIO_SLOPES)}, got {number!r}")
    if truth_grids is None:
        truth_grids = scenario_grids(K, rule)
    truth, prior = truth_grids
    x = two_block_design(T, SCENARIO_SLOPES[number](T))
    return Scenario(rc_binary_model(T), DesignSpec.single(x, truth), prior,
                    effect_counterfactual_prob(1.0), f"scenario {number}")


def scenario_grids(K: int = 1000, rule='k+1') -> tuple:
    """``(truth, prior)`` product grids shared by all two-block scenarios."""
    t1 = quantile_grid(logistic(TRUTH_LOCATION, TRUTH_SCALE), K, rule)
    p1 = quantile_grid(normal(0.0, PRIOR_VARIANCE), K, rule)
    return product_grid(t1, t1), product_grid(p1, p1)


def rate_sweep(T_list: Sequence[int], scenario: Callable[[int], Scenario],
               q: Union[float, Sequence[float]] = math.inf, reg: Regularization = NO_REG,
               residuals: bool = False) -> list:
    """
    Exact bias and s.d. for every ``T`` (and every ``q`` if a list is given).

    Returns
    -------
    list of dict
        Rows with keys ``T, q, reg_mode, bias, asd, mu0, thm1_bias,
        cs_bound, r_mu, r_pi``; the last four are NaN unless ``residuals``.
    """
    qs = list(q) if isinstance(q, (list, tuple)) else [q]
    rows = []
    for T in T_list:
        sc = scenario(T)
        res = exact_analysis(sc.model, sc.design, sc.prior_grid, sc.effect, qs, reg, residuals)
        for qq in qs:
            pa = res[qq]
            nan = float('nan')
            rows.append({
                'T': T, 'q': qq, 'reg_mode': str(reg), 'bias': pa.bias, 'asd': pa.asd, 'mu0': pa.mu0,
                'thm1_bias': pa.thm1_bias if residuals else nan,
                'cs_bound': pa.cs_bound if residuals else nan,
                'r_mu': pa.residual_norms[0] if residuals else nan,
                'r_pi': pa.residual_norms[1] if residuals else nan,
            })
    return rows


def fit_log_slope(t: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``log|values|`` against ``t``."""
    t = np.asarray(t, dtype=float)
    y = np.log(np.abs(np.asarray(values, dtype=float)))
    return float(np.polyfit(t, y, 1)[0])


def binomial_scenario(K: int = 200, truth_location: float = 0.5, truth_scale: float = 0.7,
                      prior_scale: float = 1.5, shift: float = 1.0) -> Callable[[int], Scenario]:
    """
    No-covariate binomial logit with a logistic prior and a normal truth
    supported on the prior's grid, targeting ``E[Lambda(A + shift)]``.

    With ``shift != 0`` the target is not a polynomial in the success
    probability, so no finite ``T`` makes it exactly estimable.

    The truth masses are proportional to the density ratio of truth to
    prior at the prior quantile points, so the truth is an exact
    reweighting of the equal-mass prior and the projection-residual
    identity applies.
    """
    from scipy import stats

    prior = quantile_grid(logistic(0.0, prior_scale), K)
    a = prior.points[:, 0]
    ratio = stats.norm.pdf(a, truth_location, truth_scale) / stats.logistic.pdf(a, 0.0, prior_scale)
    truth = FixedEffectGrid(prior.points, ratio / math.fsum(ratio))
    effect = EffectFunctional(f"shift_prob:{shift:g}", lambda x, alpha: expit(alpha[:, 0] + shift))

    def build(T: int) -> Scenario:
        return Scenario(BinomialNoCov(T), DesignSpec.single(None, truth), prior, effect, 'binomial')

    return build


def covariate_variation(x) -> tuple:
    """``(sum (x_t - xbar)^2, sum |x_t - xbar|)`` of a covariate path."""
    x = np.asarray(x, dtype=float).ravel()
    dev = x - x.mean()
    return math.fsum(dev ** 2), math.fsum(np.abs(dev))
