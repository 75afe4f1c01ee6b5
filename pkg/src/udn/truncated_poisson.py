"""Quantile-truncated Poisson distributions over network depth.

``TruncatedPoissonDist(lam, delta)`` is Poisson(lam) restricted to
``{0, ..., Q}`` with ``Q`` the delta-quantile, then renormalised.  Every
member has finite support, yet by moving ``lam`` the mode can sit on any
integer, which is what lets a variational posterior over depth explore an
unbounded range while each ELBO evaluation stays a finite sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad

LN2 = math.log(2.0)


class DomainError(ValueError):
    """Argument outside the support or parameter domain."""


def poisson_quantile(lam: float, delta: float) -> int:
    """Smallest ``k`` with ``P(Poisson(lam) <= k) >= delta``.

    The CDF is accumulated in log space so that large ``lam`` does not
    underflow ``exp(-lam)``.  The loop is capped at ``10 * lam + 50``, far
    beyond any quantile below 1 (the Chernoff tail decays geometrically).
    """
    if not lam > 0:
        raise DomainError(f"lambda must be positive, got {lam}")
    if not 0.0 <= delta < 1.0:
        raise DomainError(f"delta must lie in [0, 1), got {delta}")
    log_delta = math.log(delta) if delta > 0 else -math.inf
    log_lam = math.log(lam)
    log_pmf = -lam
    log_cdf = log_pmf
    k = 0
    guard = int(10 * lam + 50)
    while log_cdf < log_delta and k < guard:
        k += 1
        log_pmf += log_lam - math.log(k)
        log_cdf = np.logaddexp(log_cdf, log_pmf)
    return k


def poisson_log_pmf(k, lam: float):
    k = np.asarray(k, dtype=np.float64)
    return k * math.log(lam) - lam - gammaln(k + 1.0)


@dataclass(frozen=True)
class TruncatedPoissonDist:
    """Poisson(lam) truncated at its delta-quantile, shifted by ``shift``.

    ``shift=1`` gives a distribution over depths 1, 2, ...; ``shift=0`` is
    the raw family.
    """

    lam: float
    delta: float = 0.95
    shift: int = 0

    def __post_init__(self):
        if not self.lam > 0 or not math.isfinite(self.lam):
            raise DomainError(f"lambda must be positive and finite, got {self.lam}")
        if not 0.5 <= self.delta < 1.0:
            raise DomainError(f"delta must lie in [0.5, 1), got {self.delta}")
        if self.shift < 0:
            raise DomainError("shift must be non-negative")

    @property
    def quantile(self) -> int:
        return poisson_quantile(self.lam, self.delta)

    def support_max(self) -> int:
        """Largest value with positive mass, ``m(q)``."""
        return self.shift + self.quantile

    def support(self) -> np.ndarray:
        return np.arange(self.shift, self.support_max() + 1)

    def log_pmf_vector(self) -> np.ndarray:
        """Normalised log-probabilities over :meth:`support`."""
        k = np.arange(self.quantile + 1)
        a = poisson_log_pmf(k, self.lam)
        return a - np.logaddexp.reduce(a)

    def pmf(self) -> np.ndarray:
        return np.exp(self.log_pmf_vector())

    def log_pmf(self, ell: int) -> float:
        k = int(ell) - self.shift
        if not 0 <= k <= self.quantile:
            raise DomainError(f"{ell} is outside the support {self.shift}..{self.support_max()}")
        return float(self.log_pmf_vector()[k])

    def expectation(self, g) -> float:
        """``sum_l q(l) g(l)`` over the finite support."""
        return float(sum(p * g(int(ell)) for p, ell in zip(self.pmf(), self.support())))

    def mean(self) -> float:
        return float(self.pmf() @ self.support())

    def mode(self) -> np.ndarray:
        """All support points attaining the maximal probability."""
        lp = self.log_pmf_vector()
        return self.support()[lp >= lp.max() - 1e-12]


def log_pmf_node(raw: ad.Node, n_atoms: int) -> ad.Node:
    """Log-probabilities of the first ``n_atoms`` Poisson atoms, renormalised.

    ``raw`` is the scalar node ``log(lam)``.  The support ``{0..n_atoms-1}``
    is fixed for the duration of the graph, so the result is smooth in
    ``raw``; ``-lam`` cancels against the normaliser and is omitted.
    """
    if n_atoms < 1:
        raise DomainError("support must contain at least one atom")
    k = np.arange(n_atoms, dtype=np.float64)
    log_fact = gammaln(k + 1.0)
    logits = raw * k - log_fact
    return ad.log_softmax(logits, axis=-1)


@dataclass(frozen=True)
class DepthPrior:
    """``ell - 1 ~ Poisson(alpha)``; no truncation."""

    alpha: float
    shift: int = 1

    def __post_init__(self):
        if not self.alpha > 0:
            raise DomainError(f"alpha must be positive, got {self.alpha}")

    def log_pmf(self, ell) -> np.ndarray:
        k = np.asarray(ell, dtype=np.float64) - self.shift
        out = np.full(k.shape, -np.inf)
        ok = k >= 0
        out[ok] = poisson_log_pmf(k[ok], self.alpha)
        return out if out.ndim else float(out)

    def pmf(self, ell):
        return np.exp(self.log_pmf(ell))


# --------------------------------------------------------------------------
# Support-size guarantees at delta = 0.95


def upper_bound(lam: float) -> float:
    return 1.3 * lam + 5.0


def lower_bound(lam: float) -> float:
    return lam - LN2


@dataclass
class BoundRow:
    k: int
    m: int
    upper_bound: float
    lower_bound: float

    @property
    def margin(self) -> float:
        return self.upper_bound - self.m

    @property
    def ok(self) -> bool:
        return self.lower_bound <= self.m <= self.upper_bound


@dataclass
class BoundReport:
    rows: list

    @property
    def margins(self) -> np.ndarray:
        return np.array([r.margin for r in self.rows])

    @property
    def failures(self) -> list:
        return [r.k for r in self.rows if not r.ok]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_csv(self) -> str:
        lines = ["k,m,upper_bound,lower_bound,margin"]
        lines += [
            f"{r.k},{r.m},{r.upper_bound:.6f},{r.lower_bound:.6f},{r.margin:.6f}" for r in self.rows
        ]
        return "\n".join(lines) + "\n"


def verify_theorem1(k_max: int = 70, delta: float = 0.95, upper=None, lower=None) -> BoundReport:
    """Check the integer-point reduction of the support bounds.

    For integer ``k`` the support size must satisfy
    ``k - ln 2 <= m(q(k)) <= 1.3 (k - 1) + 5``; monotonicity of ``m`` in
    ``lam`` then extends the upper bound to every ``lam`` in ``(0, k_max]``.
    ``upper``/``lower`` replace the bound functions (used to test the
    failure path).
    """
    upper = upper or (lambda k: upper_bound(k - 1))
    lower = lower or lower_bound
    rows = []
    for k in range(1, k_max + 1):
        m = TruncatedPoissonDist(float(k), delta).support_max()
        rows.append(BoundRow(k, m, float(upper(k)), float(lower(k))))
    return BoundReport(rows)


def bound_violations(lams, delta: float = 0.95) -> list:
    """Values of ``lam`` for which ``lam - ln2 <= m <= 1.3 lam + 5`` fails."""
    bad = []
    for lam in lams:
        m = TruncatedPoissonDist(float(lam), delta).support_max()
        if not lower_bound(lam) <= m <= upper_bound(lam):
            bad.append(float(lam))
    return bad
