"""
Posterior-predictive transition matrix, its spectral (Drazin / regularized)
inverse, the finite-order and limit estimating functions, and the feasible
point estimator with its standard error.

Notation used throughout: ``F`` is the ``(n_Y, K)`` likelihood kernel on a
fixed-effect grid with masses ``pi``; ``p = F @ pi`` is the prior predictive;
the transition matrix ``Q = F diag(pi) F' diag(p)^-1`` is column-stochastic
and similar to the symmetric PSD matrix
``Qt = diag(p)^-1/2 F diag(pi) F' diag(p)^-1/2``, whose eigendecomposition
``Qt = U diag(lam) U'`` drives every inversion.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

import numpy as np
from scipy import stats

from .discretize import FixedEffectGrid
from .model import BinaryPanelModel, EffectFunctional, OutcomeSpace, UnknownOutcome

EIG_TOL = 1e-9
P_FLOOR = 1e-300
Z_95 = 1.959963984540054
DEFAULT_MEMORY_BUDGET = 512 * 2 ** 20
BLOCK_ENTRIES = 2 ** 22

GridLike = Union[FixedEffectGrid, Callable[[np.ndarray], FixedEffectGrid]]


class ZeroPredictive(FloatingPointError):
    """Prior predictive probability of some outcome is (numerically) zero."""

    def __init__(self, k: int, value: float, unit: Optional[int] = None):
        self.k, self.value, self.unit = k, value, unit
        where = f" (unit {unit})" if unit is not None else ""
        super().__init__(f"prior predictive of outcome {k} is {value:.3g}{where}; "
                         f"the prior must give every outcome positive probability")


class MemoryBudgetExceeded(MemoryError):
    pass


class EigenSolverError(np.linalg.LinAlgError):
    pass


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class LikelihoodKernel:
    """Dense ``(n_Y, K)`` matrix of label probabilities at one covariate value."""
    F: np.ndarray
    x: object
    space: OutcomeSpace
    grid: FixedEffectGrid

    @property
    def shape(self):
        return self.F.shape


def _resolve_grid(grid: GridLike, x) -> FixedEffectGrid:
    return grid if isinstance(grid, FixedEffectGrid) else grid(x)


def default_block_size(n_Y: int) -> int:
    return max(1, BLOCK_ENTRIES // max(n_Y, 1))


def iter_kernel_blocks(model: BinaryPanelModel, x, grid: FixedEffectGrid,
                       block_size: Optional[int] = None,
                       space: Optional[OutcomeSpace] = None) -> Iterator[tuple]:
    """Yield ``(slice, F_block)`` over consecutive column blocks of the kernel."""
    if space is None:
        space = model.outcome_space(x)
    if block_size is None:
        block_size = default_block_size(space.n)
    for start in range(0, grid.K, block_size):
        sl = slice(start, min(start + block_size, grid.K))
        yield sl, model.kernel(x, grid.points[sl], space)


def build_kernel(model: BinaryPanelModel, x, grid: FixedEffectGrid,
                 memory_budget: int = DEFAULT_MEMORY_BUDGET) -> LikelihoodKernel:
    space = model.outcome_space(x)
    nbytes = 8 * space.n * grid.K
    if nbytes > memory_budget:
        raise MemoryBudgetExceeded(
            f"dense kernel needs {nbytes / 2**20:.0f} MiB > budget {memory_budget / 2**20:.0f} MiB; "
            f"use accumulate_transition to stream it")
    return LikelihoodKernel(model.kernel(x, grid.points, space), x, space, grid)


def _check_predictive(p: np.ndarray, floor: float = P_FLOOR) -> np.ndarray:
    bad = np.flatnonzero(~(p > floor))
    if bad.size:
        raise ZeroPredictive(int(bad[0]), float(p[bad[0]]))
    return p


def prior_predictive(kernel: LikelihoodKernel, grid: Optional[FixedEffectGrid] = None,
                     floor: float = P_FLOOR) -> np.ndarray:
    grid = kernel.grid if grid is None else grid
    return _check_predictive(kernel.F @ grid.masses, floor)


def posterior(kernel: LikelihoodKernel, grid: Optional[FixedEffectGrid] = None, k: int = 0) -> np.ndarray:
    """Posterior masses over the grid after observing label ``k``."""
    grid = kernel.grid if grid is None else grid
    joint = kernel.F[k] * grid.masses
    pk = math.fsum(joint)
    if not pk > P_FLOOR:
        raise ZeroPredictive(k, pk)
    return joint / pk


def posterior_means(kernel: LikelihoodKernel, values: np.ndarray,
                    grid: Optional[FixedEffectGrid] = None) -> np.ndarray:
    """Posterior mean of ``values`` (one per grid point) for every label."""
    grid = kernel.grid if grid is None else grid
    p = prior_predictive(kernel, grid)
    return (kernel.F @ (grid.masses * values)) / p


# ---------------------------------------------------------------------------
# spectral transition
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SpectralTransition:
    """
    Prior predictive ``p`` and eigendecomposition of the symmetric form of Q.

    ``eigenvalues`` are sorted in descending order and clipped to ``[0, 1]``;
    ``raw_eigenvalues`` keeps the solver output.
    """
    p: np.ndarray
    eigenvalues: np.ndarray
    eigvecs: np.ndarray
    raw_eigenvalues: np.ndarray

    @property
    def n(self) -> int:
        return self.p.shape[0]

    def q_tilde(self) -> np.ndarray:
        U = self.eigvecs
        return (U * self.raw_eigenvalues) @ U.T

    def q_matrix(self) -> np.ndarray:
        """Dense column-stochastic transition matrix (for checks on small instances)."""
        r = np.sqrt(self.p)
        return r[:, None] * self.q_tilde() / r[None, :]

    def drazin(self, reg: Optional['Regularization'] = None) -> np.ndarray:
        """Dense Drazin (or regularized) inverse of Q."""
        s = spectral_weights(self.eigenvalues, math.inf, reg or NO_REG)
        r = np.sqrt(self.p)
        U = self.eigvecs
        return r[:, None] * ((U * s) @ U.T) / r[None, :]

    def neumann_sum(self, q: int, reg: Optional['Regularization'] = None) -> np.ndarray:
        """Dense ``sum_{r<=q} (I - Q)^r`` from the spectrum."""
        s = spectral_weights(self.eigenvalues, q, reg or NO_REG)
        r = np.sqrt(self.p)
        U = self.eigvecs
        return r[:, None] * ((U * s) @ U.T) / r[None, :]


def transition_from_gram(p: np.ndarray, gram: np.ndarray) -> SpectralTransition:
    """
    Eigendecompose ``diag(p)^-1/2 gram diag(p)^-1/2`` where
    ``gram = F diag(pi) F'``.
    """
    p = _check_predictive(np.asarray(p, dtype=float))
    r = 1.0 / np.sqrt(p)
    qt = gram * r[:, None] * r[None, :]
    qt = 0.5 * (qt + qt.T)
    try:
        lam, U = np.linalg.eigh(qt)
    except np.linalg.LinAlgError as exc:
        raise EigenSolverError(f"symmetric eigensolver failed for n_Y={p.shape[0]}: {exc}") from exc
    lam, U = lam[::-1].copy(), U[:, ::-1].copy()
    if lam[0] > 1 + EIG_TOL or lam[-1] < -EIG_TOL:
        warnings.warn(f"transition eigenvalues [{lam[-1]:.3g}, {lam[0]:.3g}] leave [0, 1] by more than "
                      f"{EIG_TOL:g}", RuntimeWarning, stacklevel=2)
    return SpectralTransition(p, np.clip(lam, 0.0, 1.0), U, lam)


def spectral_transition(kernel: LikelihoodKernel, grid: Optional[FixedEffectGrid] = None) -> SpectralTransition:
    grid = kernel.grid if grid is None else grid
    p = prior_predictive(kernel, grid)
    B = kernel.F * np.sqrt(grid.masses)[None, :]
    return transition_from_gram(p, B @ B.T)


def accumulate_transition(model: BinaryPanelModel, x, grid: FixedEffectGrid,
                          effects: Sequence[EffectFunctional] = (),
                          block_size: Optional[int] = None) -> tuple:
    """
    Stream the kernel in column blocks and build the spectral transition
    together with the posterior-mean vector of every effect. The kernel is
    never held in full.

    Returns
    -------
    (SpectralTransition, list of numpy.ndarray)
    """
    space = model.outcome_space(x)
    n = space.n
    p = np.zeros(n)
    gram = np.zeros((n, n))
    num = np.zeros((len(effects), n))
    for sl, F in iter_kernel_blocks(model, x, grid, block_size, space):
        mass = grid.masses[sl]
        p += F @ mass
        if grid.equal_mass:
            gram += mass[0] * (F @ F.T)
        else:
            B = F * np.sqrt(mass)[None, :]
            gram += B @ B.T
        if effects:
            mu = np.stack([e.evaluate(x, grid.points[sl]) for e in effects])
            num += (mu * mass[None, :]) @ F.T
    st = transition_from_gram(p, gram)
    return st, [row / st.p for row in num]


# ---------------------------------------------------------------------------
# regularization and estimating functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Regularization:
    """
    Eigenvalue regularization of Q.

    ``truncate`` sets eigenvalues below ``lambda_min`` to zero (the Drazin
    rule then drops them); ``clamp`` raises them to ``lambda_min``.
    """
    mode: str = 'none'
    lambda_min: float = 0.0

    def __post_init__(self):
        if self.mode not in ('none', 'truncate', 'clamp'):
            raise ValueError(f"unknown regularization mode {self.mode!r}")
        if self.mode != 'none' and not self.lambda_min > 0:
            raise ValueError("lambda_min must be positive when regularizing")

    def __str__(self) -> str:
        return 'none' if self.mode == 'none' else f"{self.mode}@{self.lambda_min:g}"

    @classmethod
    def parse(cls, value) -> 'Regularization':
        """Accept a Regularization, ``None``, ``"none"``, ``"clamp@1e-4"`` or a dict."""
        if isinstance(value, cls):
            return value
        if value is None or value == 'none':
            return cls()
        if isinstance(value, dict):
            return cls(value.get('mode', 'none'), float(value.get('lambda_min', 0.0)))
        mode, _, lam = str(value).partition('@')
        return cls(mode, float(lam or 1e-4))


NO_REG = Regularization()


def apply_regularization(eigs: np.ndarray, reg: Regularization = NO_REG) -> np.ndarray:
    eigs = np.asarray(eigs, dtype=float)
    if reg.mode == 'truncate':
        return np.where(eigs < reg.lambda_min, 0.0, eigs)
    if reg.mode == 'clamp':
        return np.maximum(eigs, reg.lambda_min)
    return eigs.copy()


def _zero_tol(eigs: np.ndarray) -> float:
    top = float(np.max(eigs)) if eigs.size else 0.0
    return eigs.size * np.finfo(float).eps * max(top, 1.0)


def spectral_weights(eigs: np.ndarray, q: float, reg: Regularization = NO_REG) -> np.ndarray:
    """
    Per-eigenvalue multipliers ``s_q(lam) = sum_{r<=q} (1-lam)^r``.

    For ``q = inf`` this is the Drazin rule: ``1/lam`` on nonzero
    eigenvalues and 0 on the null space. Eigenvalues at or below
    ``n_Y * eps`` count as zero.
    """
    lam = np.clip(apply_regularization(eigs, reg), 0.0, 1.0)
    if math.isinf(q):
        zero = lam <= (0.0 if reg.mode == 'truncate' else _zero_tol(lam))
        return np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, lam))
    if q < 0 or int(q) != q:
        raise ValueError(f"correction order must be a nonnegative integer or inf, got {q!r}")
    safe = np.where(lam == 0.0, 1.0, lam)
    with np.errstate(divide='ignore'):
        # 1 - (1-lam)^(q+1), accurate for lam near 0 and for large q
        geom = -np.expm1((q + 1) * np.log1p(-safe)) / safe
    return np.where(lam == 0.0, q + 1.0, geom)


@dataclass(frozen=True, eq=False)
class EstimatingFunction:
    """Estimating function over outcome labels at one covariate value."""
    w: np.ndarray
    q: float
    reg: Regularization = NO_REG

    def __call__(self, k):
        return self.w[k]


def estimating_function(st: SpectralTransition, m: np.ndarray, q: float = math.inf,
                        reg: Regularization = NO_REG) -> EstimatingFunction:
    """
    ``w' = m' diag(p)^1/2 U diag(s_q(lam)) U' diag(p)^-1/2``.

    ``q = 0`` returns the posterior means ``m`` themselves (the plug-in);
    ``q = inf`` applies the Drazin (or regularized) inverse of Q.
    """
    m = np.asarray(m, dtype=float)
    if q == 0:
        return EstimatingFunction(m.copy(), 0, reg)
    r = np.sqrt(st.p)
    a = (r * m) @ st.eigvecs
    s = spectral_weights(st.eigenvalues, q, reg)
    w = (st.eigvecs @ (s * a)) / r
    return EstimatingFunction(w, q, reg)


def estimating_functions(st: SpectralTransition, m: np.ndarray, qs: Iterable[float],
                         reg: Regularization = NO_REG) -> dict:
    """Several orders at once, sharing the projection of ``m`` on the eigenbasis."""
    m = np.asarray(m, dtype=float)
    r = np.sqrt(st.p)
    a = (r * m) @ st.eigvecs
    out = {}
    for q in qs:
        if q == 0:
            out[q] = EstimatingFunction(m.copy(), 0, reg)
        else:
            s = spectral_weights(st.eigenvalues, q, reg)
            out[q] = EstimatingFunction((st.eigvecs @ (s * a)) / r, q, reg)
    return out


# ---------------------------------------------------------------------------
# the estimator
# ---------------------------------------------------------------------------

def z_value(level: float) -> float:
    if level == 0.95:
        return Z_95
    return float(stats.norm.ppf(0.5 + level / 2))


@dataclass
class EstimatorReport:
    estimate: float
    influences: np.ndarray
    sigma2_hat: float
    se: float
    ci: tuple
    level: float = 0.95
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.influences.shape[0]

    def summary(self) -> str:
        lo, hi = self.ci
        return (f"estimate={self.estimate:.6g} se={self.se:.6g} "
                f"{100 * self.level:g}% CI=[{lo:.6g}, {hi:.6g}] n={self.n}")


def report_from_influences(influences: np.ndarray, level: float = 0.95, metadata: Optional[dict] = None) -> EstimatorReport:
    """Mean, plug-in variance and normal CI of per-unit influence values."""
    infl = np.asarray(influences, dtype=float)
    n = infl.shape[0]
    if n == 0:
        raise ValueError("no units")
    # centre on the first unit so identical influences give an exact mean and zero variance
    shift = math.fsum(infl - infl[0]) / n
    est = infl[0] + shift
    sigma2 = math.fsum((infl - infl[0] - shift) ** 2) / n
    se = math.sqrt(sigma2 / n)
    z = z_value(level)
    return EstimatorReport(est, infl, sigma2, se, (est - z * se, est + z * se), level, dict(metadata or {}))


def _as_panel(dataset) -> tuple:
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], np.ndarray):
        Y, X = dataset
        return list(Y), list(X)
    Y, X = [], []
    for y, x in dataset:
        Y.append(np.asarray(y))
        X.append(x)
    return Y, X


def _x_key(x) -> bytes:
    return b'' if x is None else np.ascontiguousarray(np.asarray(x, dtype=float)).tobytes()


def unit_influences(model: BinaryPanelModel, Y, X, prior_grid: GridLike,
                    effects: Sequence[EffectFunctional], qs: Sequence[float],
                    reg: Regularization = NO_REG, workers: int = 1,
                    block_size: Optional[int] = None) -> np.ndarray:
    """
    Influence values ``w(Y_i, X_i)`` for every unit, effect and order.

    Kernels and spectra are computed once per distinct covariate value.

    Returns
    -------
    numpy.ndarray
        ``(len(effects), len(qs), n)`` array.
    """
    n = len(Y)
    keys = [_x_key(x) for x in X]
    first = {}
    for i, k in enumerate(keys):
        first.setdefault(k, i)

    def solve(i):
        x = X[i]
        grid = _resolve_grid(prior_grid, x)
        try:
            st, ms = accumulate_transition(model, x, grid, effects, block_size)
        except ZeroPredictive as exc:
            raise ZeroPredictive(exc.k, exc.value, unit=i) from None
        return model.outcome_space(x), [estimating_functions(st, m, qs, reg) for m in ms]

    order = list(first.values())
    if workers > 1 and len(order) > 1:
        with ThreadPoolExecutor(workers) as pool:
            solved = dict(zip(first.keys(), pool.map(solve, order)))
    else:
        solved = {k: solve(i) for k, i in first.items()}

    out = np.empty((len(effects), len(qs), n))
    for i in range(n):
        space, fns = solved[keys[i]]
        try:
            k = space.index_of(Y[i])
        except UnknownOutcome as exc:
            raise UnknownOutcome(f"unit {i}: {exc}") from None
        for e, by_q in enumerate(fns):
            for j, q in enumerate(qs):
                out[e, j, i] = by_q[q].w[k]
    return out


def aoi_estimates(dataset, model: BinaryPanelModel, prior_grid: GridLike, effect: EffectFunctional,
                  qs: Sequence[float] = (math.inf,), reg: Regularization = NO_REG,
                  level: float = 0.95, workers: Optional[int] = None) -> dict:
    """:func:`aoi_estimate` for several correction orders, sharing the spectra."""
    Y, X = _as_panel(dataset)
    if workers is None:
        workers = int(os.environ.get('AOI_WORKERS', '1'))
    qs = list(qs)
    infl = unit_influences(model, Y, X, prior_grid, [effect], qs, reg, workers)[0]
    meta_grid = prior_grid.K if isinstance(prior_grid, FixedEffectGrid) else 'per-x'
    return {q: report_from_influences(infl[j], level, {
        'q': q, 'regularization': str(reg), 'grid_size': meta_grid,
        'model': model.name, 'effect': effect.name, 'T': model.T})
        for j, q in enumerate(qs)}


def aoi_estimate(dataset, model: BinaryPanelModel, prior_grid: GridLike, effect: EffectFunctional,
                 q: float = math.inf, reg: Regularization = NO_REG, level: float = 0.95,
                 workers: Optional[int] = None) -> EstimatorReport:
    """
    Approximate-operator-inversion estimate of the average effect.

    Parameters
    ----------
    dataset : iterable of (y, x) or tuple (Y, X) of arrays
        ``y`` is the raw length-T outcome sequence, ``x`` the unit's covariates.
    model : BinaryPanelModel
    prior_grid : FixedEffectGrid or callable
        Discretized prior; a callable receives ``x`` and returns a grid.
    effect : EffectFunctional
    q : int or inf
        Order of bias correction; ``inf`` uses the Drazin inverse.
    reg : Regularization
    level : float
        Confidence level of the normal interval.

    Returns
    -------
    EstimatorReport
    """
    return aoi_estimates(dataset, model, prior_grid, effect, [q], reg, level, workers)[q]
