"""
Finite grids standing in for continuous fixed-effect distributions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
from scipy import stats

DEFAULT_MAX_POINTS = 10 ** 7


class GridTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class Distribution1D:
    """
    One-dimensional distribution given by family and parameters.

    Families are ``logistic(location, scale)``, ``normal(mean, variance)``
    and ``uniform(lo, hi)``.
    """
    family: str
    params: tuple

    def __post_init__(self):
        if self.family not in ('logistic', 'normal', 'uniform'):
            raise ValueError(f"unknown distribution family {self.family!r}")
        if self.family == 'uniform' and not self.params[0] < self.params[1]:
            raise ValueError("uniform distribution needs lo < hi")
        if self.family in ('logistic', 'normal') and not self.params[1] > 0:
            raise ValueError(f"{self.family} distribution needs a positive scale/variance")

    @property
    def frozen(self):
        a, b = self.params
        if self.family == 'logistic':
            return stats.logistic(loc=a, scale=b)
        if self.family == 'normal':
            return stats.norm(loc=a, scale=math.sqrt(b))
        return stats.uniform(loc=a, scale=b - a)

    def quantile(self, u):
        return self.frozen.ppf(u)

    def cdf(self, a):
        return self.frozen.cdf(a)

    @classmethod
    def from_config(cls, cfg: dict) -> 'Distribution1D':
        fam = cfg['family']
        if fam == 'logistic':
            return cls('logistic', (float(cfg.get('location', 0.0)), float(cfg.get('scale', 1.0))))
        if fam == 'normal':
            return cls('normal', (float(cfg.get('mean', 0.0)), float(cfg.get('variance', 1.0))))
        if fam == 'uniform':
            return cls('uniform', (float(cfg.get('lo', 0.0)), float(cfg.get('hi', 1.0))))
        raise ValueError(f"unknown distribution family {fam!r}")


def logistic(location: float = 0.0, scale: float = 1.0) -> Distribution1D:
    return Distribution1D('logistic', (float(location), float(scale)))


def normal(mean: float = 0.0, variance: float = 1.0) -> Distribution1D:
    return Distribution1D('normal', (float(mean), float(variance)))


def uniform(lo: float = 0.0, hi: float = 1.0) -> Distribution1D:
    return Distribution1D('uniform', (float(lo), float(hi)))


@dataclass(frozen=True, eq=False)
class FixedEffectGrid:
    """
    Support points ``(K, d_a)`` with positive probability masses.

    ``equal_mass`` is true when every mass equals ``1/K``.
    """
    points: np.ndarray
    masses: np.ndarray
    equal_mass: bool = field(init=False)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        masses = np.asarray(self.masses, dtype=float).ravel()
        if masses.shape[0] != points.shape[0] or points.shape[0] == 0:
            raise ValueError("grid needs one positive mass per point and at least one point")
        if np.any(masses <= 0):
            raise ValueError("grid masses must be positive")
        if abs(math.fsum(masses) - 1.0) > 1e-12:
            raise ValueError(f"grid masses sum to {math.fsum(masses)!r}, not 1")
        points.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'masses', masses)
        object.__setattr__(self, 'equal_mass', bool(np.all(masses == masses[0])))

    @property
    def K(self) -> int:
        return self.points.shape[0]

    @property
    def d_a(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.K

    def __repr__(self) -> str:
        return f"FixedEffectGrid(K={self.K}, d_a={self.d_a}, equal_mass={self.equal_mass})"

    def distinct(self) -> bool:
        return np.unique(self.points, axis=0).shape[0] == self.K

    def mean(self, values) -> float:
        return float(np.dot(self.masses, values))


PercentileRule = Union[str, Callable[[int], np.ndarray]]


def percentiles(K: int, rule: PercentileRule = 'k+1') -> np.ndarray:
    """Interior percentile levels: ``i/(K+1)`` (default) or ``(i-1/2)/K`` ('midpoint')."""
    i = np.arange(1, K + 1)
    if rule == 'k+1':
        return i / (K + 1)
    if rule == 'midpoint':
        return (i - 0.5) / K
    if callable(rule):
        return np.asarray(rule(K), dtype=float)
    raise ValueError(f"unknown percentile rule {rule!r}")


def quantile_grid(d: Distribution1D, K: int, rule: PercentileRule = 'k+1') -> FixedEffectGrid:
    """``K`` equal-mass points at equi-spaced interior percentiles of ``d``."""
    if K < 1:
        raise ValueError("K must be at least 1")
    pts = d.quantile(percentiles(K, rule))
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"quantile evaluation failed for {d}")
    return FixedEffectGrid(pts, np.full(K, 1.0 / K))


def product_grid(g1: FixedEffectGrid, g2: FixedEffectGrid,
                 max_points: int = DEFAULT_MAX_POINTS) -> FixedEffectGrid:
    """Tensor product of two one-dimensional grids, first coordinate varying slowest."""
    if g1.d_a != 1 or g2.d_a != 1:
        raise ValueError("product_grid expects one-dimensional grids")
    n = g1.K * g2.K
    if n > max_points:
        raise GridTooLarge(f"product grid would have {n} > {max_points} points")
    a1 = np.repeat(g1.points[:, 0], g2.K)
    a2 = np.tile(g2.points[:, 0], g1.K)
    masses = np.outer(g1.masses, g2.masses).ravel()
    return FixedEffectGrid(np.column_stack([a1, a2]), masses)


def uniformize(grid: FixedEffectGrid) -> FixedEffectGrid:
    """
    Same support with every mass set to ``1/K``.

    On a quantile grid this is the discrete counterpart of mapping the fixed
    effect through its prior CDF: in index space the prior becomes uniform.
    """
    return FixedEffectGrid(grid.points, np.full(grid.K, 1.0 / grid.K))


def point_grid(alpha) -> FixedEffectGrid:
    """Single-point grid (a point-mass distribution)."""
    return FixedEffectGrid(np.atleast_2d(np.asarray(alpha, dtype=float)), np.ones(1))


def grid_from_config(cfg: dict, rule: PercentileRule = 'k+1') -> FixedEffectGrid:
    """
    ``{"dims": [dist, dist], "K": 99}`` or ``{"dist": dist, "K": 99}``; each
    ``dist`` is a distribution config as accepted by :meth:`Distribution1D.from_config`.
    """
    rule = cfg.get('percentile_rule', rule)
    if 'dims' in cfg:
        Ks = cfg['K'] if isinstance(cfg['K'], list) else [cfg['K']] * len(cfg['dims'])
        grids = [quantile_grid(Distribution1D.from_config(d), int(k), rule) for d, k in zip(cfg['dims'], Ks)]
        if len(grids) == 1:
            return grids[0]
        if len(grids) != 2:
            raise ValueError("grids over more than two dimensions are not supported")
        return product_grid(*grids)
    return quantile_grid(Distribution1D.from_config(cfg['dist']), int(cfg['K']), rule)
