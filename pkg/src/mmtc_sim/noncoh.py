"""Non-coherent pilot-index transmission and the modified AMP receiver (M-AMP).

Device ``k`` owns ``2**r`` pilot columns ``k*2**r ... (k+1)*2**r - 1`` and conveys
``r`` bits by sending exactly one of them. M-AMP gates the per-column MMSE denoiser
by a sigmoid of the sequence likelihood fraction (softmax of the per-column
log-likelihood ratios within a device), pushing at most one column per device to
stay non-zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import amp
from .config import SystemConfig
from .model import LargeScaleProfile, PilotBook, ReceivedBlock

__all__ = [
    "SigmoidGate",
    "ExtendedBookView",
    "DetectionOutcome",
    "encode_message",
    "sequence_likelihood",
    "slf",
    "sigmoid_gate",
    "mamp_denoise",
    "mamp_divergence",
    "mamp_denoiser",
    "mamp_detect",
    "eib_detect",
    "outcome_from_columns",
    "soft_outputs_csv",
]

DEFAULT_SHARPNESS = 40.0


@dataclass(frozen=True)
class SigmoidGate:
    sharpness: float = DEFAULT_SHARPNESS

    def __post_init__(self):
        if not (np.isfinite(self.sharpness) and self.sharpness > 0):
            raise ValueError("sigmoid sharpness must be finite and positive")


@dataclass(frozen=True)
class ExtendedBookView:
    """A pilot book together with its column -> (device, message index) partition."""

    book: PilotBook
    device_of_column: np.ndarray
    index_of_column: np.ndarray

    @classmethod
    def from_book(cls, book: PilotBook) -> "ExtendedBookView":
        return cls(book=book, device_of_column=book.device_of_column(), index_of_column=book.index_of_column())

    @property
    def columns_per_device(self) -> int:
        return self.book.columns_per_device

    @property
    def info_bits(self) -> int:
        return int(np.log2(self.columns_per_device))


@dataclass
class DetectionOutcome:
    """Per-device decisions of a detector."""

    active: np.ndarray  # bool (N,)
    decoded: np.ndarray  # int (N,), message index, -1 where not declared active
    device_stat: np.ndarray  # per-device activity statistic (max column v)
    column_stats: np.ndarray  # v per column
    slf: np.ndarray | None = None  # (N, 2^r) final SLF vectors (M-AMP only)
    estimates: np.ndarray | None = None  # final column estimates
    noise_state: float = float("nan")
    iterations: int = 0

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.active)


def encode_message(device: int, bits: int, info_bits: int) -> int:
    """Column index transmitted by ``device`` for message ``bits``."""
    per = 2**info_bits
    if not 0 <= bits < per:
        raise ValueError(f"message {bits} out of range for {info_bits} bits")
    if device < 0:
        raise ValueError("device index must be non-negative")
    return device * per + bits


def sequence_likelihood(xhat, beta, mu2):
    """log of the likelihood ratio (active vs noise-only) for each M-vector in ``xhat``."""
    xhat = np.asarray(xhat)
    amp._check_finite(xhat)
    if mu2 <= 0 or np.any(np.asarray(beta) <= 0):
        raise ValueError("beta and mu2 must be positive")
    energy = np.sum(xhat.real**2 + xhat.imag**2, axis=-1)
    return amp.log_likelihood_ratio(energy, beta, mu2, xhat.shape[-1])


def slf(loglik, axis: int = -1):
    """Sequence likelihood fractions: softmax of log-likelihoods along ``axis`` (max-subtracted)."""
    x = np.asarray(loglik, dtype=float)
    with np.errstate(over="ignore"):  # a gap beyond the float range gives exp(-inf) = 0
        e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid_gate(x, gate: SigmoidGate = SigmoidGate()):
    """``1 / (1 + exp(-c (x - 1/2)))``."""
    return expit(gate.sharpness * (np.asarray(x, dtype=float) - 0.5))


def mamp_denoise(device_block, beta, eps: float, mu2: float, gate: SigmoidGate | None = SigmoidGate()):
    """Modified denoiser for one device: ``f(slf_l) * eta(x_l)`` for each of its columns.

    ``device_block`` has shape ``(2**r, M)``. ``gate=None`` bypasses the sigmoid (f = 1).
    """
    block = np.asarray(device_block)
    eta = amp.denoise(block, beta, eps, mu2)
    if gate is None:
        return eta
    phi = slf(sequence_likelihood(block, beta, mu2))
    return sigmoid_gate(phi, gate)[:, None] * eta


def _gated_terms(u, gains, eps, mu2, per, gate):
    m = u.shape[1]
    energy = amp._row_energy(u)
    cq = gains / (mu2 * (mu2 + gains))
    llr = -m * np.log1p(gains / mu2) + energy * cq
    log_odds = amp._prior_log_odds(eps)
    v = np.ones_like(energy) if np.isinf(log_odds) else expit(log_odds + llr)
    s = gains / (gains + mu2)
    phi = slf(llr.reshape(-1, per), axis=1).ravel()
    if gate is None:
        f = np.ones_like(phi)
        gate_slope = np.zeros_like(phi)
    else:
        f = expit(gate.sharpness * (phi - 0.5))
        gate_slope = gate.sharpness * f * (1.0 - f) * phi * (1.0 - phi)
    div_eta = v * s * (1.0 + (1.0 - v) * cq * energy / m)
    div = f * div_eta + v * s * cq * energy / m * gate_slope
    return (f * v * s)[:, None] * u, div, v, phi


def mamp_divergence(device_block, beta, eps: float, mu2: float, gate: SigmoidGate | None = SigmoidGate()):
    """Per-column average diagonal Wirtinger derivative of :func:`mamp_denoise`.

    Adds the gate term ``v s c ||x_l||^2 / M * c_gate f (1 - f) slf_l (1 - slf_l)`` to
    ``f * div(eta)``; cross-column derivatives are not part of the Onsager term.
    """
    block = np.asarray(device_block)
    amp._check_finite(block)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), block.shape[:-1])
    _, div, _, _ = _gated_terms(block, beta, eps, mu2, block.shape[0], gate)
    return div


def mamp_denoiser(gains, eps: float, per: int, gate: SigmoidGate | None = SigmoidGate()):
    """Column-wise M-AMP denoiser for :func:`amp.run_amp` (``per`` columns per device)."""
    gains = np.asarray(gains, dtype=float)
    amp._prior_log_odds(eps)

    def apply(u, mu2):
        est, div, v, _ = _gated_terms(u, gains, eps, mu2, per, gate)
        return est, div, v

    return apply


def outcome_from_columns(v, per: int, llr=None, threshold: float = 0.5, **extra) -> DetectionOutcome:
    """Device decisions from column statistics: active iff max v > threshold, message = argmax."""
    v = np.asarray(v)
    cols = v.reshape(-1, per)
    stat = cols.max(axis=1)
    active = stat > threshold if per > 1 else stat >= threshold
    score = cols if llr is None else np.asarray(llr).reshape(-1, per)
    decoded = np.where(active, np.argmax(score, axis=1), -1)
    return DetectionOutcome(active=active, decoded=decoded, device_stat=stat, column_stats=v, **extra)


def _prepare(block, book, profile, config, powers):
    tau = book.pilot_len
    y = block.pilot_obs / np.sqrt(tau * config.max_ul_power)
    if powers is None:
        powers = np.full(profile.betas.shape, config.max_ul_power)
    gains = np.repeat(profile.betas * np.asarray(powers) / config.max_ul_power, book.columns_per_device)
    noise_var = config.noise_power / (config.max_ul_power * tau)
    return y, gains, noise_var


def mamp_detect(
    block: ReceivedBlock,
    view: ExtendedBookView | PilotBook,
    profile: LargeScaleProfile,
    eps: float,
    config: SystemConfig,
    n_iters: int = amp.DEFAULT_ITERS,
    gate: SigmoidGate | None = SigmoidGate(),
    *,
    powers=None,
    tol: float | None = amp.DEFAULT_TOL,
    damping: float = amp.DEFAULT_DAMPING,
    adaptive: bool = True,
) -> DetectionOutcome:
    """Joint activity detection and pilot-index decoding with M-AMP.

    ``eps`` is the device activity probability; each column carries the prior
    ``eps / 2**r``. A device is declared active when its largest column posterior
    exceeds 1/2 and its message is the argmax of its final SLF vector.
    """
    if isinstance(view, PilotBook):
        view = ExtendedBookView.from_book(view)
    book = view.book
    per = book.columns_per_device
    eps_col = eps / per
    y, gains, noise_var = _prepare(block, book, profile, config, powers)
    mu2_0 = amp.initial_noise_state(gains, eps_col, noise_var, book.pilot_len)
    state, pseudo, mu2_trace, _ = amp.run_amp(
        y,
        book.matrix,
        mamp_denoiser(gains, eps_col, per, gate),
        mu2_0,
        noise_var,
        n_iters=n_iters,
        tol=tol,
        damping=damping,
        adaptive=adaptive,
    )
    mu2 = state.noise_state
    energy = np.sum(pseudo.real**2 + pseudo.imag**2, axis=1)
    llr = amp.log_likelihood_ratio(energy, gains, mu2, pseudo.shape[1])
    v = amp.activity_posterior(energy, gains, eps_col, mu2, pseudo.shape[1])
    return outcome_from_columns(
        v,
        per,
        llr,
        slf=slf(llr.reshape(-1, per), axis=1),
        estimates=state.estimates,
        noise_state=mu2,
        iterations=len(mu2_trace) - 1,
    )


def eib_detect(
    block: ReceivedBlock,
    view: ExtendedBookView | PilotBook,
    profile: LargeScaleProfile,
    eps: float,
    config: SystemConfig,
    n_iters: int = amp.DEFAULT_ITERS,
    *,
    powers=None,
    tol: float | None = amp.DEFAULT_TOL,
    damping: float = amp.DEFAULT_DAMPING,
    adaptive: bool = True,
) -> DetectionOutcome:
    """Baseline: unmodified AMP on the extended book, each column a fictitious device."""
    book = view.book if isinstance(view, ExtendedBookView) else view
    per = book.columns_per_device
    out = amp.amp_detect(
        block,
        book,
        profile,
        eps / per,
        config,
        n_iters,
        powers=powers,
        tol=tol,
        damping=damping,
        adaptive=adaptive,
    )
    energy = np.sum(out.pseudo_obs.real**2 + out.pseudo_obs.imag**2, axis=1)
    gains = np.repeat(_prepare(block, book, profile, config, powers)[1].reshape(-1, per)[:, 0], per)
    llr = amp.log_likelihood_ratio(energy, gains, out.noise_state, out.pseudo_obs.shape[1])
    return outcome_from_columns(
        out.activity_stats,
        per,
        llr,
        estimates=out.estimates,
        noise_state=out.noise_state,
        iterations=out.iterations,
    )


def soft_outputs_csv(outcome: DetectionOutcome) -> str:
    """Per-device soft outputs as CSV: device, active, decoded, stat, slf_0..slf_{2^r-1}."""
    per = 1 if outcome.slf is None else outcome.slf.shape[1]
    header = ["device", "active", "decoded", "max_v"] + [f"slf_{i}" for i in range(per)]
    lines = [",".join(header)]
    for k in range(outcome.active.size):
        row = [str(k), str(int(outcome.active[k])), str(int(outcome.decoded[k])), f"{outcome.device_stat[k]:.17g}"]
        row += [f"{x:.17g}" for x in (outcome.slf[k] if outcome.slf is not None else [1.0])]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"
