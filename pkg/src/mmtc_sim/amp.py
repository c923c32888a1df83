"""AMP for row-sparse recovery of the effective channel matrix.

All routines work in the normalised domain ``Y / sqrt(tau_p * rho_max) = Phi X + W``
where ``W`` has per-entry variance ``noise_var = sigma^2 / (rho_max * tau_p)`` and row
``n`` of ``X`` is CN(0, gain_n I) when active. The effective noise of the decoupled
per-column problem is tracked as a scalar ``mu2`` (covariance ``mu2 * I``).
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .config import SystemConfig
from .model import LargeScaleProfile, PilotBook, ReceivedBlock, crandn

__all__ = [
    "AmpDivergenceError",
    "NoiseMode",
    "Decision",
    "AmpState",
    "AmpOutput",
    "log_likelihood_ratio",
    "activity_posterior",
    "activity_posterior_direct",
    "denoise",
    "denoiser_divergence",
    "mmse_denoiser",
    "update_noise_state",
    "initial_noise_state",
    "amp_iterate",
    "run_amp",
    "amp_detect",
    "decide_activity",
    "energy_threshold",
    "diagnostics_csv",
]

MU2_FLOOR_FACTOR = 1e-15
DIVERGENCE_GROWTH = 1e6
DEFAULT_ITERS = 100
DEFAULT_TOL = 1e-6
DEFAULT_DAMPING = 0.5
MAX_DAMPING = 0.95
# relative rise of mu2 that triggers more damping
ADAPT_RTOL = 1e-3


class AmpDivergenceError(RuntimeError):
    """Residual blew up during the AMP iterations."""


class NoiseMode(str, enum.Enum):
    EMPIRICAL = "empirical"
    STATE_EVOLUTION = "state_evolution"


class Decision(str, enum.Enum):
    POSTERIOR = "posterior"
    ENERGY = "energy"


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input to denoiser")


def log_likelihood_ratio(energy, beta, mu2, m: int):
    """log of p(x | active) / p(x | inactive) for an M-vector with squared norm ``energy``.

    Active: CN(0, (beta + mu2) I); inactive: CN(0, mu2 I).
    """
    beta = np.asarray(beta, dtype=float)
    cq = beta / (mu2 * (mu2 + beta))
    return -m * np.log1p(beta / mu2) + np.asarray(energy) * cq


def _prior_log_odds(eps: float) -> float:
    if not 0.0 < eps <= 1.0:
        raise ValueError(f"activity prior must lie in (0, 1], got {eps}")
    return np.inf if eps == 1.0 else np.log(eps) - np.log1p(-eps)


def activity_posterior(energy, beta, eps: float, mu2, m: int):
    """Posterior activity probability ``v`` given the squared norm of the observation."""
    log_odds = _prior_log_odds(eps)
    if np.isinf(log_odds):
        return np.ones(np.broadcast(np.asarray(energy), np.asarray(beta)).shape)
    return expit(log_odds + log_likelihood_ratio(energy, beta, mu2, m))


def activity_posterior_direct(xhat, beta, eps, mu2):
    """Textbook (non-log-domain) evaluation of ``v``; overflows for large M or SNR."""
    xhat = np.asarray(xhat)
    m = xhat.shape[-1]
    q = np.exp(-np.sum(np.abs(xhat) ** 2, axis=-1) * (1.0 / mu2 - 1.0 / (mu2 + beta)))
    det = (1.0 + beta / mu2) ** m
    return 1.0 / (1.0 + (1.0 - eps) / eps * det * q)


def denoise(xhat, beta, eps: float, mu2: float):
    """MMSE denoiser for the Bernoulli-Gaussian row prior.

    ``xhat`` has shape ``(..., M)``; ``beta`` broadcasts against the leading dims.
    Returns ``v * beta / (beta + mu2) * xhat``.
    """
    xhat = np.asarray(xhat)
    beta = np.asarray(beta, dtype=float)
    _check_finite(xhat, beta)
    if mu2 <= 0 or np.any(beta <= 0):
        raise ValueError("beta and mu2 must be positive")
    energy = np.sum(xhat.real**2 + xhat.imag**2, axis=-1)
    v = activity_posterior(energy, beta, eps, mu2, xhat.shape[-1])
    return (v * beta / (beta + mu2))[..., None] * xhat


def denoiser_divergence(xhat, beta, eps: float, mu2: float):
    """Average diagonal Wirtinger derivative ``(1/M) sum_m d eta_m / d x_m``.

    Closed form ``v s (1 + (1 - v) c ||x||^2 / M)`` with ``s = beta/(beta+mu2)`` and
    ``c = 1/mu2 - 1/(mu2+beta)``.
    """
    xhat = np.asarray(xhat)
    beta = np.asarray(beta, dtype=float)
    _check_finite(xhat, beta)
    m = xhat.shape[-1]
    energy = np.sum(xhat.real**2 + xhat.imag**2, axis=-1)
    v = activity_posterior(energy, beta, eps, mu2, m)
    cq = beta / (mu2 * (mu2 + beta))
    return v * beta / (beta + mu2) * (1.0 + (1.0 - v) * cq * energy / m)


def _row_energy(u):
    """Squared norm of every row of a complex 2-D array."""
    if u.flags.c_contiguous and u.dtype == np.complex128:
        f = u.view(np.float64)
        return np.einsum("ij,ij->i", f, f)
    return np.sum(u.real**2 + u.imag**2, axis=-1)


def mmse_denoiser(gains, eps: float):
    """Column-wise denoiser for :func:`run_amp`: returns ``(estimates, divergence, v)``."""
    gains = np.asarray(gains, dtype=float)
    log_odds = _prior_log_odds(eps)
    cache = {}

    def coeffs(mu2, m):
        key = (mu2, m)
        if key not in cache:
            cache.clear()
            cq = gains / (mu2 * (mu2 + gains))
            cache[key] = (cq, log_odds - m * np.log1p(gains / mu2), gains / (gains + mu2))
        return cache[key]

    def apply(u, mu2):
        m = u.shape[1]
        energy = _row_energy(u)
        cq, base, s = coeffs(mu2, m)
        v = np.ones_like(energy) if np.isinf(log_odds) else expit(base + energy * cq)
        vs = v * s
        div = vs * (1.0 + (1.0 - v) * cq * energy / m)
        return vs[:, None] * u, div, v

    return apply


@dataclass
class AmpState:
    estimates: np.ndarray  # (n_cols, M)
    residual: np.ndarray  # (tau_p, M)
    noise_state: float  # mu_t^2
    iteration: int = 0
    damping: float = 0.0


@dataclass
class AmpOutput:
    estimates: np.ndarray
    activity_stats: np.ndarray  # v per column at the final pseudo-observation
    support: np.ndarray  # declared-active column indices
    noise_state_trace: list = field(default_factory=list)
    residual_trace: list = field(default_factory=list)
    pseudo_obs: np.ndarray | None = None  # final decoupled observations, (n_cols, M)
    noise_state: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.noise_state_trace) - 1


def initial_noise_state(gains, eps: float, noise_var: float, tau_p: int) -> float:
    """State-evolution value after the all-zero start: ``noise_var + (n/tau_p) eps mean(gain)``."""
    gains = np.asarray(gains, dtype=float)
    return noise_var + gains.size / tau_p * eps * float(np.mean(gains))


def update_noise_state(
    residual,
    mode: NoiseMode = NoiseMode.EMPIRICAL,
    *,
    noise_var: float | None = None,
    mu2: float | None = None,
    gains=None,
    eps: float | None = None,
    n_samples: int = 10_000,
    seed=None,
    denoiser_factory: Callable | None = None,
) -> float:
    """Next value of the effective noise variance ``mu^2``.

    Empirical: ``||R||_F^2 / (tau_p M)``. StateEvolution: one step of the scalar
    recursion ``noise_var + (n/tau_p) E||eta(x + mu w) - x||^2 / M`` with the
    expectation over gains, activity and noise estimated from ``n_samples`` draws.
    """
    residual = np.asarray(residual)
    if residual.size == 0:
        raise ValueError("empty residual")
    tau_p, m = residual.shape
    if NoiseMode(mode) is NoiseMode.EMPIRICAL:
        return float(np.vdot(residual, residual).real / (tau_p * m))
    if noise_var is None or mu2 is None or gains is None or eps is None:
        raise ValueError("state evolution needs noise_var, mu2, gains and eps")
    gains = np.asarray(gains, dtype=float)
    rng = np.random.default_rng(seed)
    beta = rng.choice(gains, size=n_samples)
    active = rng.random(n_samples) < eps
    x = crandn(rng, (n_samples, m)) * (np.sqrt(beta) * active)[:, None]
    obs = x + np.sqrt(mu2) * crandn(rng, (n_samples, m))
    factory = denoiser_factory or mmse_denoiser
    est, _, _ = factory(beta, eps)(obs, mu2)
    mse = np.sum(np.abs(est - x) ** 2) / (n_samples * m)
    return float(noise_var + gains.size / tau_p * mse)


def amp_iterate(
    state: AmpState,
    y: np.ndarray,
    phi: np.ndarray,
    denoiser: Callable,
    *,
    noise_var: float,
    mode: NoiseMode = NoiseMode.EMPIRICAL,
    onsager: bool = True,
    phi_h: np.ndarray | None = None,
    se_kwargs: dict | None = None,
) -> AmpState:
    """One AMP step: denoise the matched-filter pseudo-observation, Onsager-correct the residual.

    With ``state.damping = d > 0`` the new estimates and residual are blended as
    ``d * old + (1 - d) * new``; ``d = 0`` is the undamped recursion.
    """
    tau_p, n_cols = phi.shape
    phi_h = phi.conj().T if phi_h is None else phi_h
    u = phi_h @ state.residual
    u += state.estimates
    est, div, _ = denoiser(u, state.noise_state)
    residual = phi @ est
    np.subtract(y, residual, out=residual)
    if onsager:
        residual += ((n_cols / tau_p) * float(np.mean(div))) * state.residual
    d = state.damping
    if d > 0:
        est *= 1.0 - d
        est += d * state.estimates
        residual *= 1.0 - d
        residual += d * state.residual
    if NoiseMode(mode) is NoiseMode.EMPIRICAL:
        mu2 = update_noise_state(residual)
    else:
        mu2 = update_noise_state(residual, mode, noise_var=noise_var, mu2=state.noise_state, **(se_kwargs or {}))
    mu2 = max(mu2, MU2_FLOOR_FACTOR * noise_var)
    return AmpState(estimates=est, residual=residual, noise_state=mu2, iteration=state.iteration + 1, damping=d)


def _fro(a) -> float:
    return float(np.sqrt(np.vdot(a, a).real))


def run_amp(
    y: np.ndarray,
    phi: np.ndarray,
    denoiser: Callable,
    mu2_init: float,
    noise_var: float,
    *,
    n_iters: int = DEFAULT_ITERS,
    tol: float | None = DEFAULT_TOL,
    mode: NoiseMode = NoiseMode.EMPIRICAL,
    onsager: bool = True,
    damping: float = DEFAULT_DAMPING,
    adaptive: bool = True,
    se_kwargs: dict | None = None,
) -> tuple[AmpState, np.ndarray, list, list]:
    """Iterate from ``X = 0, R = Y`` and return ``(state, pseudo_obs, mu2_trace, resid_trace)``.

    When ``adaptive`` is set, every iteration that raises ``mu2`` by more than
    ``ADAPT_RTOL`` (relative) moves the damping halfway towards ``MAX_DAMPING``. Stops
    after ``n_iters`` or once the relative residual change drops below ``tol``.
    """
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    tau_p, n_cols = phi.shape
    phi_h = phi.conj().T
    state = AmpState(
        estimates=np.zeros((n_cols, y.shape[1]), dtype=complex),
        residual=np.array(y, dtype=complex),
        noise_state=max(float(mu2_init), MU2_FLOOR_FACTOR * noise_var),
        damping=damping,
    )
    r0 = float(np.linalg.norm(state.residual))
    mu2_trace = [state.noise_state]
    resid_trace = [r0]
    state_evolution = NoiseMode(mode) is NoiseMode.STATE_EVOLUTION
    for t in range(n_iters):
        kw = dict(se_kwargs or {})
        if state_evolution:
            kw.setdefault("seed", t)
        new = amp_iterate(
            state, y, phi, denoiser, noise_var=noise_var, mode=mode, onsager=onsager, phi_h=phi_h, se_kwargs=kw
        )
        rn = _fro(new.residual)
        if not np.isfinite(rn) or (r0 > 0 and rn > DIVERGENCE_GROWTH * r0):
            raise AmpDivergenceError(
                f"AMP residual diverged at iteration {new.iteration}: |R| = {rn:.3e} vs initial {r0:.3e}"
            )
        if adaptive and new.noise_state > (1.0 + ADAPT_RTOL) * state.noise_state:
            new.damping = min(MAX_DAMPING, new.damping + (MAX_DAMPING - new.damping) / 2)
        mu2_trace.append(new.noise_state)
        change = _fro(new.residual - state.residual)
        prev_norm = resid_trace[-1]
        resid_trace.append(rn)
        state = new
        if tol is not None and change <= tol * prev_norm:
            break
    pseudo = phi_h @ state.residual + state.estimates
    return state, pseudo, mu2_trace, resid_trace


def energy_threshold(beta, mu2: float, m: int):
    """Default energy threshold: geometric midpoint of ``(M mu2, M (beta + mu2))``."""
    return m * np.sqrt(mu2 * (np.asarray(beta) + mu2))


def decide_activity(
    xhat,
    beta,
    eps: float,
    mu2: float,
    decision: Decision = Decision.POSTERIOR,
    zeta: float | None = None,
):
    """Activity decision for one (or a stack of) decoupled observation(s)."""
    if mu2 <= 0:
        raise ValueError("mu2 must be positive")
    xhat = np.asarray(xhat)
    m = xhat.shape[-1]
    energy = np.sum(np.abs(xhat) ** 2, axis=-1)
    if Decision(decision) is Decision.POSTERIOR:
        out = activity_posterior(energy, beta, eps, mu2, m) >= 0.5
    else:
        beta_arr = np.asarray(beta, dtype=float)
        if zeta is None:
            thr = energy_threshold(beta_arr, mu2, m)
        else:
            thr = zeta
            lo, hi = m * mu2, m * (beta_arr + mu2)
            if np.any((zeta <= lo) | (zeta >= hi)):
                warnings.warn(
                    f"energy threshold {zeta:g} outside the admissible interval ({lo:g}, {np.max(hi):g})",
                    stacklevel=2,
                )
        out = energy > thr
    return bool(out) if np.ndim(out) == 0 else out


def amp_detect(
    block: ReceivedBlock,
    book: PilotBook,
    profile: LargeScaleProfile,
    eps: float,
    config: SystemConfig,
    n_iters: int = DEFAULT_ITERS,
    decision: Decision = Decision.POSTERIOR,
    *,
    powers=None,
    mode: NoiseMode = NoiseMode.EMPIRICAL,
    onsager: bool = True,
    tol: float | None = DEFAULT_TOL,
    zeta: float | None = None,
    damping: float = DEFAULT_DAMPING,
    adaptive: bool = True,
) -> AmpOutput:
    """Detect active pilot columns with AMP.

    Each column is treated as its own device (for an extended book this is the
    fictitious-device baseline) with prior ``eps`` and effective gain
    ``beta_k rho_k / rho_max`` of its owning device.
    """
    tau_p = book.pilot_len
    y = block.pilot_obs / np.sqrt(tau_p * config.max_ul_power)
    if powers is None:
        powers = np.full(profile.betas.shape, config.max_ul_power)
    gains = np.repeat(profile.betas * np.asarray(powers) / config.max_ul_power, book.columns_per_device)
    noise_var = config.noise_power / (config.max_ul_power * tau_p)
    mu2_0 = initial_noise_state(gains, eps, noise_var, tau_p)
    se_kwargs = {"gains": gains, "eps": eps} if NoiseMode(mode) is NoiseMode.STATE_EVOLUTION else None
    state, pseudo, mu2_trace, resid_trace = run_amp(
        y,
        book.matrix,
        mmse_denoiser(gains, eps),
        mu2_0,
        noise_var,
        n_iters=n_iters,
        tol=tol,
        mode=mode,
        onsager=onsager,
        damping=damping,
        adaptive=adaptive,
        se_kwargs=se_kwargs,
    )
    mu2 = state.noise_state
    energy = np.sum(pseudo.real**2 + pseudo.imag**2, axis=1)
    v = activity_posterior(energy, gains, eps, mu2, pseudo.shape[1])
    active = decide_activity(pseudo, gains, eps, mu2, decision, zeta)
    return AmpOutput(
        estimates=state.estimates,
        activity_stats=v,
        support=np.flatnonzero(active),
        noise_state_trace=mu2_trace,
        residual_trace=resid_trace,
        pseudo_obs=pseudo,
        noise_state=mu2,
    )


def diagnostics_csv(output: AmpOutput) -> str:
    """Per-iteration diagnostics as CSV text: ``iteration,residual_fro,mu2``."""
    lines = ["iteration,residual_fro,mu2"]
    for t, (r, mu2) in enumerate(zip(output.residual_trace, output.noise_state_trace)):
        lines.append(f"{t},{r:.17g},{mu2:.17g}")
    return "\n".join(lines) + "\n"
