"""Analytic oracles: pilot collisions, energy-detector error probabilities, asymptotic SINR."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LargeScaleProfile, PilotBook

__all__ = [
    "UNBOUNDED",
    "DetectionErrorPrediction",
    "collision_probability",
    "gamma_p",
    "gamma_q",
    "detection_error_probabilities",
    "threshold_interval",
    "geometric_midpoint",
    "asymptotic_sinr",
]

# sentinel returned by asymptotic_sinr for an interference-free device
UNBOUNDED = math.inf

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 100_000


def collision_probability(tau_p: int, n: int) -> float:
    """Probability that ``n`` devices drawing uniform Bernoulli pilots of length ``tau_p`` collide.

    There are ``4**tau_p`` distinct sequences; the product ``prod_{k<n}(1 - k/4**tau_p)`` is
    accumulated as a sum of ``log1p`` terms.
    """
    if tau_p < 1 or n < 1:
        raise ValueError("tau_p and n must be positive")
    size = 4**tau_p
    if n > size:
        return 1.0
    k = np.arange(1, n, dtype=float)
    return float(-np.expm1(np.sum(np.log1p(-k / size))))


def _gamma_series(a: float, x: float) -> float:
    """Lower regularised incomplete gamma by its power series (good for x < a + 1)."""
    ap = a
    term = total = 1.0 / a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise ArithmeticError("incomplete gamma series did not converge")
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf(a: float, x: float) -> float:
    """Upper regularised incomplete gamma by the Lentz continued fraction (good for x >= a + 1)."""
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    else:
        raise ArithmeticError("incomplete gamma continued fraction did not converge")
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gamma_p(a: float, x: float) -> float:
    """Regularised lower incomplete gamma ``P(a, x) = gamma(a, x) / Gamma(a)``."""
    if a <= 0:
        raise ValueError("shape must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    if x < a + 1.0:
        return _gamma_series(a, x)
    return 1.0 - _gamma_cf(a, x)


def gamma_q(a: float, x: float) -> float:
    """Regularised upper incomplete gamma ``Q(a, x) = 1 - P(a, x)``, accurate in both tails."""
    if a <= 0:
        raise ValueError("shape must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    if math.isinf(x):
        return 0.0
    if x < a + 1.0:
        return 1.0 - _gamma_series(a, x)
    return _gamma_cf(a, x)


@dataclass(frozen=True)
class DetectionErrorPrediction:
    pr_md: float
    pr_fa: float
    zeta: float
    zeta_md: float  # zeta / (beta + mu2)
    zeta_fa: float  # zeta / mu2

    def __post_init__(self):
        if not (0.0 <= self.pr_md <= 1.0 and 0.0 <= self.pr_fa <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")


def detection_error_probabilities(m: int, zeta: float, beta: float, mu2: float,
                                  complex_gaussian: bool = False) -> DetectionErrorPrediction:
    """Miss and false-alarm probabilities of the test ``||x||^2 > zeta``.

    By default ``Pr_MD = P(M, zeta_MD / 2)`` and ``Pr_FA = Q(M, zeta_FA / 2)``: the energy
    normalised by the per-entry variance is chi-squared with ``2M`` degrees of freedom, which
    describes vectors whose real and imaginary parts each carry that variance. With
    ``complex_gaussian=True`` the entries are CN(0, variance) (variance split across the
    real and imaginary parts) and the halving is dropped.
    """
    if m < 1 or zeta <= 0 or beta <= 0 or mu2 <= 0:
        raise ValueError("M, zeta, beta and mu2 must be positive")
    zeta_md = zeta / (beta + mu2)
    zeta_fa = zeta / mu2
    scale = 1.0 if complex_gaussian else 0.5
    return DetectionErrorPrediction(
        pr_md=gamma_p(m, zeta_md * scale),
        pr_fa=gamma_q(m, zeta_fa * scale),
        zeta=float(zeta),
        zeta_md=zeta_md,
        zeta_fa=zeta_fa,
    )


def threshold_interval(m: int, beta: float, mu2: float) -> tuple[float, float]:
    """Admissible energy thresholds ``(M mu2, M (beta + mu2))``."""
    if m < 1 or beta < 0 or mu2 <= 0:
        raise ValueError("need M >= 1, beta >= 0, mu2 > 0")
    return m * mu2, m * (beta + mu2)


def geometric_midpoint(m: int, beta: float, mu2: float) -> float:
    """Geometric mean of the interval ends, ``M sqrt(mu2 (beta + mu2))``."""
    lo, hi = threshold_interval(m, beta, mu2)
    return math.sqrt(lo * hi)


def asymptotic_sinr(k: int, active, book: PilotBook, powers, profile: LargeScaleProfile,
                    messages=None, rel_tol: float = 1e-12) -> float:
    """Large-antenna limit of the MRC SINR: ``rho_k^2 beta_k^2 / sum_k' |phi_k^H phi_k'|^2 rho_k'^2 beta_k'^2``.

    Returns :data:`UNBOUNDED` when the interference sum vanishes (below ``rel_tol`` times
    the numerator), e.g. for mutually orthogonal pilots.
    """
    active = np.asarray(active, dtype=int)
    per = book.columns_per_device
    cols = active * per + (0 if messages is None else np.asarray(messages)[active])
    pos = np.flatnonzero(active == k)
    if pos.size != 1:
        raise ValueError("device k must appear once in the active set")
    pos = int(pos[0])
    w = (np.asarray(powers)[active] * profile.betas[active]) ** 2
    corr = np.abs(book.matrix[:, cols[pos]].conj() @ book.matrix[:, cols]) ** 2
    others = np.arange(active.size) != pos
    num = w[pos]
    den = float(np.sum(corr[others] * w[others]))
    if den <= rel_tol * num:
        return UNBOUNDED
    return float(num / den)
