"""
Seeded Monte Carlo study of the estimator in a random-coefficient logit
with a continuous, heterogeneity-dependent covariate.

Data-generating process (per unit ``i`` and period ``t``)::

    A1 ~ N(a1_mean, a1_sd^2),   A2 ~ N(a2_mean, a2_sd^2)
    X_t | A ~ N(A1 + A2, x_sd^2)
    Y_t = 1{X_t A2 + A1 >= eps_t},   eps_t standard logistic

Every draw is a deterministic function of ``(seed, rep, variable, unit,
period)``: each (seed, rep, variable) triple keys its own Philox stream and
unit ``i``, period ``t`` reads position ``i*T + t`` of it. Results therefore
do not depend on the number of workers or on the order replications run in.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.special import ndtri

from .discretize import FixedEffectGrid, grid_from_config, logistic, normal, product_grid, quantile_grid
from .estimator import Regularization, report_from_influences, unit_influences, z_value
from .model import EffectFunctional, RandomCoefficientBinary, effect_from_id

STREAM_TAGS = {'a1': 1, 'a2': 2, 'x': 3, 'eps': 4}
DEFAULT_EFFECTS = ('ape', 'cf_prob:1', 'cf_prob:0')


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class DGP:
    a1_mean: float = 0.0
    a1_sd: float = 1.0
    a2_mean: float = 1.0
    a2_sd: float = 1.0
    x_sd: float = 1.0

    @classmethod
    def from_config(cls, cfg: Optional[dict]) -> 'DGP':
        return cls(**{k: float(v) for k, v in (cfg or {}).items()})


@dataclass
class Dataset:
    """Raw outcomes ``Y`` and covariates ``X``, both ``(n, T)``; ``A`` is kept for checks."""
    Y: np.ndarray
    X: np.ndarray
    A: np.ndarray

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    def pairs(self) -> list:
        return list(zip(self.Y, self.X))


def _uniforms(seed: int, rep: int, tag: str, size: int) -> np.ndarray:
    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), int(rep), STREAM_TAGS[tag]])
    u = np.random.Generator(np.random.Philox(ss)).random(size)
    # shift off zero so inverse CDFs stay finite; the largest value is 1 - 2^-54 < 1
    return u + 2.0 ** -54


def simulate_dataset(dgp: DGP, n: int, T: int, seed: int, rep: int = 0) -> Dataset:
    """Draw one panel of ``n`` units over ``T`` periods."""
    a1 = dgp.a1_mean + dgp.a1_sd * ndtri(_uniforms(seed, rep, 'a1', n))
    a2 = dgp.a2_mean + dgp.a2_sd * ndtri(_uniforms(seed, rep, 'a2', n))
    zx = ndtri(_uniforms(seed, rep, 'x', n * T)).reshape(n, T)
    X = (a1 + a2)[:, None] + dgp.x_sd * zx
    u = _uniforms(seed, rep, 'eps', n * T).reshape(n, T)
    eps = np.log(u) - np.log1p(-u)
    Y = (X * a2[:, None] + a1[:, None] >= eps).astype(np.int8)
    return Dataset(Y, X, np.column_stack([a1, a2]))


# ---------------------------------------------------------------------------
# priors and true values
# ---------------------------------------------------------------------------

def prior_grid(prior, L: int = 99, rule='k+1') -> FixedEffectGrid:
    """
    Prior 1: logistic(1, 1) x logistic(0, 1); prior 2: logistic(1, 2) x
    logistic(0, 2); prior 3: N(0, 1) x N(1, 1). A dict is passed to
    :func:`grid_from_config`.
    """
    if isinstance(prior, dict):
        return grid_from_config({'K': L, **prior}, rule)
    marg = {1: (logistic(1, 1), logistic(0, 1)),
            2: (logistic(1, 2), logistic(0, 2)),
            3: (normal(0, 1), normal(1, 1))}
    if prior not in marg:
        raise ValueError(f"prior must be 1, 2, 3 or a grid config, got {prior!r}")
    d1, d2 = marg[prior]
    return product_grid(quantile_grid(d1, L, rule), quantile_grid(d2, L, rule))


def _gh_value(dgp: DGP, effect: EffectFunctional, n: int) -> float:
    z, w = hermegauss(n)
    w = w / w.sum()
    a1 = dgp.a1_mean + dgp.a1_sd * z
    a2 = dgp.a2_mean + dgp.a2_sd * z
    A1, A2, Z = np.meshgrid(a1, a2, z, indexing='ij')
    W = w[:, None, None] * w[None, :, None] * w[None, None, :]
    alpha = np.column_stack([A1.ravel(), A2.ravel()])
    x = (A1 + A2 + dgp.x_sd * Z).ravel()[None, :]
    vals = effect.evaluate(x, alpha)
    return math.fsum(vals * W.ravel())


def true_effect_value(dgp: DGP, effect: EffectFunctional, tol: float = 1e-7,
                      start: int = 16, max_nodes: int = 256) -> float:
    """
    Expectation of ``effect`` under the DGP by tensor Gauss-Hermite
    quadrature over ``(A1, A2, X | A)``, doubling the node count until two
    successive values agree to ``tol``.
    """
    n = start
    prev = _gh_value(dgp, effect, n)
    while n < max_nodes:
        n *= 2
        cur = _gh_value(dgp, effect, n)
        if abs(cur - prev) < tol:
            return cur
        prev = cur
    raise QuadratureError(f"quadrature for {effect.name} did not converge with {max_nodes} nodes")


# ---------------------------------------------------------------------------
# the study
# ---------------------------------------------------------------------------

@dataclass
class StudyConfig:
    n: int = 500
    T: int = 6
    reps: int = 200
    seed: int = 20240101
    dgp: DGP = field(default_factory=DGP)
    prior: object = 3
    effects: tuple = DEFAULT_EFFECTS
    q_list: tuple = (0, math.inf)
    reg: Regularization = field(default_factory=lambda: Regularization('clamp', 1e-4))
    L: int = 99
    level: float = 0.95

    def __post_init__(self):
        for name in ('n', 'T', 'reps', 'L'):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        self.effects = tuple(self.effects)
        self.q_list = tuple(self.q_list)

    @property
    def prior_label(self) -> str:
        return str(self.prior) if not isinstance(self.prior, dict) else 'custom'

    def echo(self) -> dict:
        d = asdict(self)
        d['reg'] = str(self.reg)
        d['q_list'] = ['inf' if math.isinf(q) else q for q in self.q_list]
        return d


@dataclass
class StudyResult:
    """Per-(effect, q) metrics plus the raw replication draws."""
    config: StudyConfig
    truths: dict
    estimates: dict
    ses: dict
    failures: int = 0

    def metrics(self, effect: str, q: float) -> dict:
        est = self.estimates[(effect, q)]
        se = self.ses[(effect, q)]
        truth = self.truths[effect]
        reps = est.shape[0]
        mean = math.fsum(est) / reps
        sd = math.sqrt(math.fsum((est - mean) ** 2) / reps)
        mean_se = math.fsum(se) / reps
        z = z_value(self.config.level)
        cover = np.abs(est - truth) <= z * se
        return {
            'effect': effect, 'prior': self.config.prior_label, 'T': self.config.T, 'q': q,
            'bias': mean - truth, 'sd': sd,
            'se_sd_ratio': mean_se / sd if sd > 0 else float('nan'),
            'coverage95': float(np.count_nonzero(cover)) / reps,
        }

    def rows(self) -> list:
        return [self.metrics(e, q) for e in self.config.effects for q in self.config.q_list]


def run_replication(cfg: StudyConfig, rep: int, grid: Optional[FixedEffectGrid] = None) -> tuple:
    """Estimates and standard errors, each ``(len(effects), len(q_list))``."""
    grid = grid if grid is not None else prior_grid(cfg.prior, cfg.L)
    data = simulate_dataset(cfg.dgp, cfg.n, cfg.T, cfg.seed, rep)
    model = RandomCoefficientBinary(cfg.T)
    effects = [effect_from_id(e, model) for e in cfg.effects]
    infl = unit_influences(model, list(data.Y), list(data.X), grid, effects, list(cfg.q_list), cfg.reg)
    est = np.empty(infl.shape[:2])
    se = np.empty(infl.shape[:2])
    for i in range(infl.shape[0]):
        for j in range(infl.shape[1]):
            rep_ij = report_from_influences(infl[i, j], cfg.level)
            est[i, j], se[i, j] = rep_ij.estimate, rep_ij.se
    return est, se


_WORKER_STATE: dict = {}


def _worker_init(cfg: StudyConfig):
    _WORKER_STATE['cfg'] = cfg
    _WORKER_STATE['grid'] = prior_grid(cfg.prior, cfg.L)


def _worker_run(rep: int):
    try:
        return rep, run_replication(_WORKER_STATE['cfg'], rep, _WORKER_STATE['grid'])
    except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
        return rep, exc


def default_workers() -> int:
    return max(1, int(os.environ.get('AOI_WORKERS', '1')))


def run_study(cfg: StudyConfig, workers: Optional[int] = None, progress=None) -> StudyResult:
    """
    Run every replication and collect estimates and standard errors.

    Replications that fail numerically are excluded and counted in
    ``failures``. ``workers > 1`` uses a process pool; the output is
    identical for any worker count.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    model = RandomCoefficientBinary(cfg.T)
    truths = {e: true_effect_value(cfg.dgp, effect_from_id(e, model)) for e in cfg.effects}
    results = {}
    if workers == 1:
        _worker_init(cfg)
        for rep in range(cfg.reps):
            results[rep] = _worker_run(rep)[1]
            if progress is not None:
                progress(rep)
    else:
        with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(cfg,)) as pool:
            for rep, out in pool.map(_worker_run, range(cfg.reps)):
                results[rep] = out
                if progress is not None:
                    progress(rep)
    good = [results[r] for r in range(cfg.reps) if not isinstance(results[r], Exception)]
    failures = cfg.reps - len(good)
    if not good:
        raise RuntimeError(f"all {cfg.reps} replications failed; first error: {results[0]!r}")
    est = np.stack([g[0] for g in good])
    se = np.stack([g[1] for g in good])
    estimates, ses = {}, {}
    for i, e in enumerate(cfg.effects):
        for j, q in enumerate(cfg.q_list):
            estimates[(e, q)] = est[:, i, j]
            ses[(e, q)] = se[:, i, j]
    return StudyResult(cfg, truths, estimates, ses, failures)
