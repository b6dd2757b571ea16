"""
Panel models with finite outcome sets and the average-effect functionals
evaluated on them.

Every model here is a binary-choice panel: period ``t`` has success
probability ``link(z_t(x, alpha))`` for a model-specific linear index
``z_t``. Outcome spaces may be collapsed to within-block success counts
whenever a block of periods is exchangeable (identical index for every
``alpha``). Probabilities are always reported for a *label*, i.e. they
include the label's multiplicity, so kernel columns sum to one.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit, gammaln, log_ndtr, ndtr

DEFAULT_MAX_OUTCOMES = 2 ** 20


class OutcomeSpaceOverflow(ValueError):
    """Raised when an enumerated outcome space would exceed the size cap."""


class UnknownOutcome(ValueError):
    """Raised when an observed outcome is not a member of the outcome space."""


# ---------------------------------------------------------------------------
# links
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Link:
    """A strictly increasing CDF used as the per-period success probability."""
    name: str
    cdf: Callable[[np.ndarray], np.ndarray]
    logcdf: Callable[[np.ndarray], np.ndarray]
    logsf: Callable[[np.ndarray], np.ndarray]
    pdf: Callable[[np.ndarray], np.ndarray]

    def log_odds(self, z: np.ndarray) -> np.ndarray:
        if self.name == 'logistic':
            return z
        return self.logcdf(z) - self.logsf(z)

    @classmethod
    def from_cdf(cls, cdf: Callable, name: str = 'custom', pdf: Optional[Callable] = None) -> 'Link':
        """Wrap an arbitrary CDF; log-probabilities are taken naively."""
        def logcdf(z):
            with np.errstate(divide='ignore'):
                return np.log(cdf(z))

        def logsf(z):
            with np.errstate(divide='ignore'):
                return np.log1p(-cdf(z))

        if pdf is None:
            def pdf(z, h=1e-6):
                return (cdf(z + h) - cdf(z - h)) / (2 * h)
        return cls(name, cdf, logcdf, logsf, pdf)


def _logistic_cdf(z):
    # one exp per entry and no cancellation in either tail
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    r = 1.0 / (1.0 + e)
    return np.where(z >= 0, r, e * r)


def _logistic_pdf(z):
    e = np.exp(-np.abs(z))
    return e / np.square(1.0 + e)


LOGISTIC = Link(
    'logistic', _logistic_cdf,
    lambda z: -np.logaddexp(0.0, -z),
    lambda z: -np.logaddexp(0.0, z),
    _logistic_pdf,
)
PROBIT = Link(
    'probit', ndtr, log_ndtr,
    lambda z: log_ndtr(-z),
    lambda z: np.exp(-0.5 * np.square(z)) / np.sqrt(2 * np.pi),
)
_LINKS = {'logistic': LOGISTIC, 'logit': LOGISTIC, 'probit': PROBIT, 'normal': PROBIT}


def get_link(link) -> Link:
    if isinstance(link, Link):
        return link
    if callable(link):
        return Link.from_cdf(link)
    try:
        return _LINKS[link]
    except KeyError:
        raise ValueError(f"unknown link {link!r}; expected one of {sorted(_LINKS)}") from None


# ---------------------------------------------------------------------------
# outcome spaces
# ---------------------------------------------------------------------------

class OutcomeSpace:
    """
    Finite outcome space made of per-block success counts.

    A block of size one keeps the raw outcome of that period, so a space
    whose blocks are all singletons is the raw ``{0,1}^T`` space. Labels are
    tuples of block counts in lexicographic order.

    Parameters
    ----------
    blocks : sequence of sequences of int
        Partition of the periods ``0..T-1``.
    """

    def __init__(self, blocks: Sequence[Sequence[int]]):
        self.blocks = tuple(tuple(int(t) for t in b) for b in blocks)
        self.T = sum(len(b) for b in self.blocks)
        if sorted(t for b in self.blocks for t in b) != list(range(self.T)):
            raise ValueError("blocks must partition the periods 0..T-1")
        self.block_sizes = tuple(len(b) for b in self.blocks)
        self.radices = tuple(s + 1 for s in self.block_sizes)
        self.n = int(np.prod(self.radices, dtype=np.int64))
        self._strides = np.array(
            [int(np.prod(self.radices[i + 1:], dtype=np.int64)) for i in range(len(self.radices))],
            dtype=np.int64)

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"OutcomeSpace(n={self.n}, block_sizes={self.block_sizes})"

    @property
    def stats(self) -> np.ndarray:
        """(n, B) integer matrix of block counts, one row per label."""
        grids = np.meshgrid(*[np.arange(r) for r in self.radices], indexing='ij')
        return np.stack([g.ravel() for g in grids], axis=1)

    @property
    def labels(self) -> list:
        return list(itertools.product(*[range(r) for r in self.radices]))

    @property
    def log_multiplicity(self) -> np.ndarray:
        s = self.stats
        sizes = np.asarray(self.block_sizes)
        return (gammaln(sizes + 1) - gammaln(s + 1) - gammaln(sizes - s + 1)).sum(axis=1)

    @property
    def multiplicity(self) -> np.ndarray:
        return np.rint(np.exp(self.log_multiplicity)).astype(np.int64)

    def label_of(self, y) -> tuple:
        """Collapse a raw length-T 0/1 sequence into its label."""
        y = np.asarray(y).ravel()
        if y.shape[0] != self.T or not np.all((y == 0) | (y == 1)):
            raise UnknownOutcome(f"outcome {y.tolist()} is not a binary sequence of length {self.T}")
        return tuple(int(y[list(b)].sum()) for b in self.blocks)

    def index_of(self, y) -> int:
        """Row index of a raw outcome sequence (or of a label tuple)."""
        y = np.asarray(y).ravel()
        if y.shape[0] == self.T and (len(self.blocks) != self.T or np.all((y == 0) | (y == 1))):
            label = self.label_of(y)
        elif y.shape[0] == len(self.blocks):
            label = tuple(int(v) for v in y)
        else:
            raise UnknownOutcome(f"outcome {y.tolist()} does not match the outcome space")
        if any(not 0 <= s <= n for s, n in zip(label, self.block_sizes)):
            raise UnknownOutcome(f"label {label} outside the outcome space")
        return int(np.dot(label, self._strides))

    def indices_of(self, Y: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`index_of` for an (n, T) array of raw outcomes."""
        Y = np.asarray(Y)
        if Y.ndim != 2 or Y.shape[1] != self.T:
            raise UnknownOutcome(f"expected raw outcomes of shape (n, {self.T}), got {Y.shape}")
        if not np.all((Y == 0) | (Y == 1)):
            raise UnknownOutcome("raw outcomes must be 0/1")
        counts = np.stack([Y[:, list(b)].sum(axis=1) for b in self.blocks], axis=1)
        return counts.astype(np.int64) @ self._strides


def _outer_sum(terms: Sequence[np.ndarray], base: np.ndarray) -> np.ndarray:
    """
    ``base + sum_b terms[b][label_b]`` for every label, lexicographic order.

    Filled in place, least significant block first: after adding block
    ``b`` the leading ``L`` rows hold every combination of the blocks
    processed so far.
    """
    n = int(np.prod([t.shape[0] for t in terms], dtype=np.int64))
    out = np.empty((n, base.shape[0]))
    out[0] = base
    L = 1
    for term in reversed(terms):
        r = term.shape[0]
        head = out[:L]
        for j in range(r - 1, 0, -1):
            np.add(head, term[j], out=out[j * L:(j + 1) * L])
        head += term[0]
        L *= r
    return out


def _outer_product(factors: Sequence[tuple]) -> np.ndarray:
    """Probability-space analogue of :func:`_outer_sum` for singleton blocks."""
    K = factors[0][0].shape[0]
    out = np.empty((2 ** len(factors), K))
    out[0] = 1.0
    L = 1
    for q, p in reversed(factors):
        np.multiply(out[:L], p, out=out[L:2 * L])
        out[:L] *= q
        L *= 2
    return out


# ---------------------------------------------------------------------------
# models
# ---------------------------------------------------------------------------

class BinaryPanelModel:
    """
    Base class for static binary-choice panel models.

    Subclasses provide :meth:`period_index`, the ``(T, K)`` array of linear
    indices ``z_t`` at covariate value ``x`` for ``K`` fixed-effect points.
    """
    name = 'binary'
    d_a = 1

    def __init__(self, T: int, link='logistic', collapse: bool = False,
                 max_outcomes: int = DEFAULT_MAX_OUTCOMES):
        if T < 1:
            raise ValueError("T must be at least 1")
        self.T = int(T)
        self.link = get_link(link)
        self.collapse = bool(collapse)
        self.max_outcomes = int(max_outcomes)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(T={self.T}, link={self.link.name!r}, collapse={self.collapse})"

    def period_index(self, x, alpha: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def covariate_rows(self, x) -> np.ndarray:
        """Per-period covariate rows used to detect exchangeable periods."""
        return np.asarray(x, dtype=float).reshape(self.T, -1)

    def blocks(self, x) -> tuple:
        if not self.collapse:
            return tuple((t,) for t in range(self.T))
        rows = self.covariate_rows(x)
        groups: dict = {}
        for t in range(self.T):
            groups.setdefault(rows[t].tobytes(), []).append(t)
        return tuple(tuple(g) for g in groups.values())

    def outcome_space(self, x) -> OutcomeSpace:
        return enumerate_outcomes(self, x)

    def _alpha(self, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        if alpha.ndim == 0:
            alpha = alpha.reshape(1, 1)
        if alpha.ndim == 1 and self.d_a == 1:
            alpha = alpha[:, None]
        if alpha.ndim == 1:
            alpha = alpha[None, :]
        if alpha.shape[1] != self.d_a:
            raise ValueError(f"fixed effects must have dimension {self.d_a}, got shape {alpha.shape}")
        return alpha

    def log_kernel(self, x, alpha, space: Optional[OutcomeSpace] = None) -> np.ndarray:
        """
        Log outcome-label probabilities.

        Returns
        -------
        numpy.ndarray
            ``(n_Y, K)`` array with ``log f(label_k | x, alpha_j)``.
        """
        alpha = self._alpha(alpha)
        if space is None:
            space = self.outcome_space(x)
        z = self.period_index(x, alpha)
        reps = [b[0] for b in space.blocks]
        zb = z[reps]
        logsf = self.link.logsf(zb)
        lodds = self.link.log_odds(zb)
        sizes = np.asarray(space.block_sizes)
        base = (sizes[:, None] * logsf).sum(axis=0)
        terms = [np.arange(n + 1)[:, None] * lodds[b][None, :] for b, n in enumerate(space.block_sizes)]
        return _outer_sum(terms, base) + space.log_multiplicity[:, None]

    def kernel(self, x, alpha, space: Optional[OutcomeSpace] = None) -> np.ndarray:
        """Outcome-label probabilities, ``(n_Y, K)``."""
        if space is None:
            space = self.outcome_space(x)
        if all(n == 1 for n in space.block_sizes):
            # raw outcome space: multiply per-period probabilities directly
            z = self.period_index(x, self._alpha(alpha))
            z = z[[b[0] for b in space.blocks]]
            p, q = self.link.cdf(z), self.link.cdf(-z)
            return _outer_product(list(zip(q, p)))
        out = self.log_kernel(x, alpha, space)
        return np.exp(out, out=out)

    def outcome_prob(self, y, x, alpha) -> float:
        """Probability of the label containing outcome ``y`` at a single ``alpha``."""
        space = self.outcome_space(x)
        k = space.index_of(y)
        return float(self.kernel(x, self._alpha(alpha)[:1], space)[k, 0])


class StaticLogit(BinaryPanelModel):
    """Static logit with known slope vector ``beta`` and scalar fixed effect."""
    name = 'static_logit'

    def __init__(self, T: int, beta, collapse: bool = False, **kwargs):
        super().__init__(T, 'logistic', collapse, **kwargs)
        self.beta = np.atleast_1d(np.asarray(beta, dtype=float))

    def covariate_rows(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim <= 1:
            x = x.reshape(self.T, -1) if x.size == self.T * self.beta.size else x.reshape(-1, 1)
        if x.shape != (self.T, self.beta.size):
            raise ValueError(
                f"covariates must have shape (T, {self.beta.size}) = ({self.T}, {self.beta.size}), got {x.shape}")
        return x

    def period_index(self, x, alpha):
        alpha = self._alpha(alpha)
        xb = self.covariate_rows(x) @ self.beta
        return xb[:, None] + alpha[None, :, 0]


class BinomialNoCov(BinaryPanelModel):
    """Number of successes out of ``T`` trials with probability ``link(alpha)``."""
    name = 'binomial_nocov'

    def __init__(self, T: int, link='logistic', **kwargs):
        super().__init__(T, link, True, **kwargs)

    def covariate_rows(self, x=None):
        return np.zeros((self.T, 1))

    def period_index(self, x, alpha):
        alpha = self._alpha(alpha)
        return np.broadcast_to(alpha[None, :, 0], (self.T, alpha.shape[0]))


class RandomCoefficientBinary(BinaryPanelModel):
    """Binary choice with additive effect ``alpha_1`` and slope ``alpha_2`` on a scalar covariate."""
    name = 'rc_binary'
    d_a = 2

    def __init__(self, T: int, link='logistic', collapse: bool = True, **kwargs):
        super().__init__(T, link, collapse, **kwargs)

    def covariate_rows(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).ravel()
        if x.shape[0] != self.T:
            raise ValueError(f"covariate vector must have length T={self.T}, got {x.shape[0]}")
        return x[:, None]

    def period_index(self, x, alpha):
        alpha = self._alpha(alpha)
        x = self.covariate_rows(x)[:, 0]
        return alpha[None, :, 0] + x[:, None] * alpha[None, :, 1]


def enumerate_outcomes(model: BinaryPanelModel, x=None, max_outcomes: Optional[int] = None) -> OutcomeSpace:
    """Smallest outcome space compatible with the model's declared exchangeability."""
    cap = model.max_outcomes if max_outcomes is None else max_outcomes
    blocks = model.blocks(x)
    n = 1
    for b in blocks:
        n *= len(b) + 1
        if n > cap:
            raise OutcomeSpaceOverflow(f"outcome space would exceed {cap} labels")
    return OutcomeSpace(blocks)


def static_logit_model(T: int, beta, collapse: bool = False) -> StaticLogit:
    return StaticLogit(T, beta, collapse=collapse)


def binomial_nocov_model(T: int, link='logistic') -> BinomialNoCov:
    return BinomialNoCov(T, link)


def rc_binary_model(T: int, link='logistic', collapse: bool = True) -> RandomCoefficientBinary:
    return RandomCoefficientBinary(T, link, collapse=collapse)


def two_block_design(T: int, c: float) -> np.ndarray:
    """Covariate equal to 0 in the first ``T/2`` periods and ``c`` afterwards."""
    if T % 2:
        raise ValueError("the two-block design needs an even number of periods")
    return np.concatenate([np.zeros(T // 2), np.full(T // 2, float(c))])


# ---------------------------------------------------------------------------
# effect functionals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EffectFunctional:
    """
    Known function ``mu(x, alpha)`` whose average is the target.

    ``func(x, alpha)`` receives a ``(K, d_a)`` array of fixed-effect points
    and returns ``K`` values.
    """
    name: str
    func: Callable[[object, np.ndarray], np.ndarray]

    def evaluate(self, x, alpha) -> np.ndarray:
        alpha = np.asarray(alpha, dtype=float)
        if alpha.ndim == 1:
            alpha = alpha[:, None]
        return np.asarray(self.func(x, alpha), dtype=float).reshape(alpha.shape[0])


def effect_counterfactual_prob(target_x: float, link='logistic') -> EffectFunctional:
    """Success probability with the covariate set to ``target_x``."""
    link = get_link(link)
    target_x = float(target_x)

    def func(x, alpha):
        return link.cdf(alpha[:, 0] + target_x * alpha[:, 1])

    return EffectFunctional(f"cf_prob:{target_x:g}", func)


def effect_ape_logistic(period: Optional[int] = None) -> EffectFunctional:
    """
    Average partial effect of the covariate in the random-coefficient logit.

    By default the derivative is averaged over periods; ``period`` selects a
    single period instead. ``x`` may also be a ``(T, K)`` array holding a
    separate covariate path for every fixed-effect point.
    """
    def func(x, alpha):
        x = np.asarray(x, dtype=float)
        xs = x.reshape(x.shape[0], -1) if x.ndim == 2 else x.ravel()[:, None]
        if period is not None:
            xs = xs[[period]]
        z = alpha[None, :, 0] + xs * alpha[None, :, 1]
        return (alpha[None, :, 1] * _logistic_pdf(z)).mean(axis=0)

    return EffectFunctional('ape' if period is None else f"ape:{period}", func)


def effect_treatment_effect(model: StaticLogit) -> EffectFunctional:
    """
    Effect of switching the binary first covariate from 0 to 1 in every
    period on the time-averaged outcome of a static logit.
    """
    beta = model.beta

    def func(x, alpha):
        rows = model.covariate_rows(x)
        rest = rows[:, 1:] @ beta[1:]
        z0 = rest[:, None] + alpha[None, :, 0]
        return (expit(z0 + beta[0]) - expit(z0)).mean(axis=0)

    return EffectFunctional('ate', func)


def effect_constant(c: float) -> EffectFunctional:
    return EffectFunctional(f"const:{c:g}", lambda x, alpha: np.full(alpha.shape[0], float(c)))


# ---------------------------------------------------------------------------
# string identifiers
# ---------------------------------------------------------------------------

def model_from_config(cfg: dict) -> BinaryPanelModel:
    """Build a model from ``{"id": ..., "T": ..., ...}``."""
    mid = cfg['id']
    T = int(cfg['T'])
    if mid in ('rc_binary_logit', 'rc_binary_probit', 'rc_binary'):
        link = cfg.get('link', 'probit' if mid.endswith('probit') else 'logistic')
        return RandomCoefficientBinary(T, link, collapse=cfg.get('collapse', True))
    if mid == 'static_logit':
        return StaticLogit(T, cfg.get('beta', [0.0]), collapse=cfg.get('collapse', False))
    if mid in ('binomial_logit', 'binomial_probit', 'binomial_nocov'):
        link = cfg.get('link', 'probit' if mid.endswith('probit') else 'logistic')
        return BinomialNoCov(T, link)
    raise ValueError(f"unknown model id {mid!r}")


def effect_from_id(effect_id: str, model: Optional[BinaryPanelModel] = None) -> EffectFunctional:
    """Parse ``"ape"``, ``"ape:<t>"``, ``"cf_prob:<x>"``, ``"ate"`` or ``"const:<c>"``."""
    head, _, arg = effect_id.partition(':')
    if head == 'ape':
        return effect_ape_logistic(int(arg) if arg else None)
    if head == 'cf_prob':
        link = model.link if model is not None else 'logistic'
        return effect_counterfactual_prob(float(arg or 1.0), link)
    if head == 'ate':
        if not isinstance(model, StaticLogit):
            raise ValueError("the 'ate' effect requires a static_logit model")
        return effect_treatment_effect(model)
    if head == 'const':
        return effect_constant(float(arg))
    raise ValueError(f"unknown effect id {effect_id!r}")
