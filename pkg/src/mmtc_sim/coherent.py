"""Coherent baseline: MMSE channel estimation, MRC combining, SINR and coded payloads.

Pilot observations follow the :mod:`model` convention ``Y = sum_k sqrt(tau_p rho_k)
phi_k g_k^T + Z`` (``tau_p x M``), so the matched-filter output of device ``k`` is
``y_k = Y^T conj(phi_k)``. Data symbols arrive as rows ``y_t = sum_k sqrt(rho_k) g_k
x_{k,t} + z_t``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import amp
from .config import SystemConfig
from .model import LargeScaleProfile, PilotBook, ReceivedBlock, crandn, draw_trial, fresh_seed

__all__ = [
    "EstimatorKind",
    "CodeKind",
    "ChannelEstimate",
    "LinearCode",
    "SinrTerms",
    "PayloadStats",
    "repetition",
    "HAMMING74",
    "pilot_correlations",
    "mmse_estimate",
    "mmse_gamma",
    "amp_estimate",
    "perfect_estimate",
    "mrc_sinr_closed_form",
    "lemma_terms",
    "achievable_rate",
    "sinr_terms_monte_carlo",
    "sinr_monte_carlo",
    "pooled_sinr",
    "combiner_samples",
    "code_encode",
    "code_decode",
    "bits_to_bpsk",
    "simulate_coherent_payload",
    "payload_trial",
]


class EstimatorKind(str, enum.Enum):
    AMP = "amp"
    AMP_PLUS_MMSE = "amp+mmse"
    PERFECT = "perfect"


class CodeKind(str, enum.Enum):
    REPETITION = "repetition"
    HAMMING74 = "hamming74"


@dataclass(frozen=True)
class ChannelEstimate:
    devices: np.ndarray  # device indices, (D,)
    ghat: np.ndarray  # (D, M) estimates of g_k
    gamma: np.ndarray  # (D,) mean square of an estimate entry
    source: EstimatorKind

    def __post_init__(self):
        if self.ghat.shape[0] != self.devices.size or self.gamma.shape != self.devices.shape:
            raise ValueError("inconsistent estimate shapes")
        if self.source is EstimatorKind.AMP_PLUS_MMSE and np.any(self.gamma <= 0):
            raise ValueError("MMSE gamma must be positive")


@dataclass(frozen=True)
class LinearCode:
    kind: CodeKind
    length: int
    dimension: int

    def __post_init__(self):
        if self.kind is CodeKind.REPETITION and (self.dimension != 1 or self.length < 1):
            raise ValueError("repetition code needs dimension 1 and length >= 1")
        if self.kind is CodeKind.HAMMING74 and (self.length, self.dimension) != (7, 4):
            raise ValueError("Hamming code is (7, 4)")

    @property
    def label(self) -> str:
        return f"rep{self.length}" if self.kind is CodeKind.REPETITION else "hamming74"


def repetition(length: int) -> LinearCode:
    return LinearCode(CodeKind.REPETITION, int(length), 1)


HAMMING74 = LinearCode(CodeKind.HAMMING74, 7, 4)

# systematic generator [I | P] and parity-check [P^T | I]
_H74_P = np.array([[1, 1, 0], [1, 0, 1], [0, 1, 1], [1, 1, 1]], dtype=np.uint8)
_H74_G = np.hstack([np.eye(4, dtype=np.uint8), _H74_P])
_H74_H = np.hstack([_H74_P.T, np.eye(3, dtype=np.uint8)])
# syndrome (as integer) -> flipped position
_H74_SYNDROME = {int(_H74_H[:, j] @ [4, 2, 1]): j for j in range(7)}


def pilot_correlations(book: PilotBook, columns) -> np.ndarray:
    """``|phi_a^H phi_b|^2`` for the given column indices."""
    sub = book.matrix[:, np.asarray(columns)]
    return np.abs(sub.conj().T @ sub) ** 2


def _columns(book, devices, messages=None):
    devices = np.asarray(devices, dtype=int)
    per = book.columns_per_device
    return devices * per + (0 if messages is None else np.asarray(messages)[devices])


def mmse_gamma(detected, book: PilotBook, powers, profile: LargeScaleProfile, config: SystemConfig, messages=None):
    """Mean square of an entry of the MMSE estimate for each detected device."""
    detected = np.asarray(detected, dtype=int)
    if detected.size == 0:
        return np.zeros(0)
    tau = book.pilot_len
    rho, beta = np.asarray(powers)[detected], profile.betas[detected]
    corr = pilot_correlations(book, _columns(book, detected, messages))
    denom = corr @ (rho * tau * beta) + config.noise_power
    return rho * tau * beta**2 / denom


def mmse_estimate(
    block: ReceivedBlock,
    detected,
    book: PilotBook,
    powers,
    profile: LargeScaleProfile,
    config: SystemConfig,
    messages=None,
) -> ChannelEstimate:
    """LMMSE channel estimates treating ``detected`` as the complete active set."""
    detected = np.asarray(detected, dtype=int)
    m = block.pilot_obs.shape[1]
    if detected.size == 0:
        return ChannelEstimate(detected, np.zeros((0, m), complex), np.zeros(0), EstimatorKind.AMP_PLUS_MMSE)
    tau = book.pilot_len
    cols = _columns(book, detected, messages)
    rho, beta = np.asarray(powers)[detected], profile.betas[detected]
    corr = pilot_correlations(book, cols)
    denom = corr @ (rho * tau * beta) + config.noise_power
    y = (book.matrix[:, cols].conj().T) @ block.pilot_obs  # rows are y_k^T
    ghat = (np.sqrt(rho * tau) * beta / denom)[:, None] * y
    gamma = rho * tau * beta**2 / denom
    return ChannelEstimate(detected, ghat, gamma, EstimatorKind.AMP_PLUS_MMSE)


def amp_estimate(output: amp.AmpOutput, detected, powers, config: SystemConfig, book: PilotBook | None = None,
                 messages=None) -> ChannelEstimate:
    """Channel estimates read from the final AMP rows, rescaled from ``sqrt(rho/rho_max) g`` to ``g``.

    ``gamma`` is the realised mean square of each estimate's entries.
    """
    detected = np.asarray(detected, dtype=int)
    rows = detected if book is None else _columns(book, detected, messages)
    scale = np.sqrt(config.max_ul_power / np.asarray(powers)[detected])
    ghat = scale[:, None] * output.estimates[rows]
    gamma = np.mean(np.abs(ghat) ** 2, axis=1) if detected.size else np.zeros(0)
    return ChannelEstimate(detected, ghat, gamma, EstimatorKind.AMP)


def perfect_estimate(devices, channels, profile: LargeScaleProfile) -> ChannelEstimate:
    """True channels ``g_k = sqrt(beta_k) h_k``; ``gamma = beta_k``."""
    devices = np.asarray(devices, dtype=int)
    ghat = np.sqrt(profile.betas[devices])[:, None] * channels[devices]
    return ChannelEstimate(devices, ghat, profile.betas[devices].copy(), EstimatorKind.PERFECT)


@dataclass(frozen=True)
class SinrTerms:
    """Pieces of the use-and-forget SINR for one device."""

    signal: float  # |E(v^H g_k)|^2 rho_k
    interference: float  # sum_k' E|v^H g_k'|^2 rho_k'  (including k' = k)
    noise: float  # E||v||^2 sigma^2

    @property
    def sinr(self) -> float:
        return self.signal / (self.interference + self.noise - self.signal)


def lemma_terms(k: int, active, book: PilotBook, powers, profile: LargeScaleProfile, config: SystemConfig,
                messages=None) -> SinrTerms:
    """Closed-form expectations for the MMSE estimate with the MRC combiner ``ghat/(gamma sqrt(M))``.

    Each interferer contributes ``rho' beta' / gamma + M rho'^2 beta'^2 |phi_k^H phi_k'|^2 / (rho beta^2)``.
    """
    active = np.asarray(active, dtype=int)
    if k not in set(active.tolist()):
        raise ValueError("device k must be in the active set")
    m = config.n_antennas
    rho, beta = np.asarray(powers)[active], profile.betas[active]
    pos = int(np.flatnonzero(active == k)[0])
    gamma = mmse_gamma(active, book, powers, profile, config, messages)[pos]
    corr = pilot_correlations(book, _columns(book, active, messages))[pos]
    rk, bk = rho[pos], beta[pos]
    interference = np.sum(rho * beta / gamma + m * rho**2 * beta**2 * corr / (rk * bk**2))
    return SinrTerms(signal=m * rk, interference=float(interference), noise=config.noise_power / gamma)


def mrc_sinr_closed_form(k: int, active, book: PilotBook, powers, profile: LargeScaleProfile, config: SystemConfig,
                         messages=None) -> float:
    """Effective MRC SINR of device ``k`` with MMSE estimates over ``active``."""
    active = np.asarray(active, dtype=int)
    m = config.n_antennas
    rho, beta = np.asarray(powers)[active], profile.betas[active]
    pos = int(np.flatnonzero(active == k)[0])
    gamma = mmse_gamma(active, book, powers, profile, config, messages)[pos]
    corr = pilot_correlations(book, _columns(book, active, messages))[pos]
    others = np.arange(active.size) != pos
    rk, bk = rho[pos], beta[pos]
    coherent = m * np.sum(corr[others] * rho[others] ** 2 * beta[others] ** 2) / (rk * bk**2)
    return float(m * rk / (coherent + (np.sum(rho * beta) + config.noise_power) / gamma))


def achievable_rate(sinr, tau: int, tau_p: int):
    """``(1 - tau_p/tau) log2(1 + sinr)`` in bits/s/Hz."""
    if not 0 <= tau_p <= tau:
        raise ValueError("need 0 <= tau_p <= tau")
    return (1.0 - tau_p / tau) * np.log2(1.0 + np.asarray(sinr, dtype=float))


def sinr_terms_monte_carlo(k: int, active, book: PilotBook, powers, profile: LargeScaleProfile, config: SystemConfig,
                           n_draws: int = 10_000, seed=None, messages=None, batch: int = 1000) -> SinrTerms:
    """Estimate the SINR expectations by sampling channels and pilot noise.

    The pilot book, active set and large-scale gains are fixed; channels ``h`` and the
    pilot-phase noise are redrawn. The combiner is the MRC vector built from the MMSE
    estimate over ``active``.
    """
    active = np.asarray(active, dtype=int)
    pos = int(np.flatnonzero(active == k)[0])
    rng = np.random.default_rng(seed)
    m, tau = config.n_antennas, book.pilot_len
    rho, beta = np.asarray(powers)[active], profile.betas[active]
    cols = _columns(book, active, messages)
    phi = book.matrix[:, cols]
    gamma = mmse_gamma(active, book, powers, profile, config, messages)[pos]
    corr = pilot_correlations(book, cols)[pos]
    coef = np.sqrt(rho[pos] * tau) * beta[pos] / (corr @ (rho * tau * beta) + config.noise_power)
    mf = phi[:, pos].conj() @ phi  # phi_k^H phi_k' as seen by y_k
    s_sig = 0.0 + 0.0j
    s_int = s_noise = 0.0
    done = 0
    while done < n_draws:
        b = min(batch, n_draws - done)
        g = np.sqrt(beta)[None, :, None] * crandn(rng, (b, active.size, m))
        z = crandn(rng, (b, m), config.noise_power)
        y = np.einsum("j,bjm->bm", np.sqrt(rho * tau) * mf, g) + z
        v = coef * y / (gamma * np.sqrt(m))
        proj = np.einsum("bm,bjm->bj", v.conj(), g)
        s_sig += proj[:, pos].sum()
        s_int += float(np.sum(np.abs(proj) ** 2 @ rho))
        s_noise += float(np.sum(np.abs(v) ** 2))
        done += b
    mean_sig = s_sig / n_draws
    return SinrTerms(
        signal=float(np.abs(mean_sig) ** 2 * rho[pos]),
        interference=s_int / n_draws,
        noise=s_noise / n_draws * config.noise_power,
    )


def sinr_monte_carlo(k: int, active, book: PilotBook, powers, profile: LargeScaleProfile, config: SystemConfig,
                     n_draws: int = 10_000, seed=None, messages=None) -> float:
    return sinr_terms_monte_carlo(k, active, book, powers, profile, config, n_draws, seed, messages).sinr


def combiner_samples(est: ChannelEstimate, g, powers, betas, noise_power: float):
    """Per-device samples ``(a, b, c)`` of the SINR expectations for pooling across trials.

    ``a = v^H g_k sqrt(rho_k)``, ``b = sum_k' rho_k' |v^H g_k'|^2`` and ``c = sigma^2 ||v||^2``
    with ``v = ghat_k / (sqrt(rho_k) beta_k)``. ``g`` holds the true channel rows of all
    transmitting devices (zero rows for silent ones). Under statistical channel inversion
    this normalisation makes the samples identically distributed across devices; a common
    scale of ``v`` cancels in :func:`pooled_sinr`.
    """
    dev = est.devices
    if dev.size == 0:
        return np.zeros(0, complex), np.zeros(0), np.zeros(0)
    rho = np.asarray(powers, dtype=float)
    v = est.ghat / (np.sqrt(rho[dev]) * np.asarray(betas)[dev])[:, None]
    proj = v.conj() @ g.T  # (D, N)
    a = proj[np.arange(dev.size), dev] * np.sqrt(rho[dev])
    b = np.abs(proj) ** 2 @ rho
    c = noise_power * np.sum(np.abs(v) ** 2, axis=1)
    return a, b, c


def pooled_sinr(a, b, c) -> float:
    """Use-and-forget SINR from pooled samples: ``|E a|^2 / (E b + E c - |E a|^2)``."""
    a, b, c = (np.asarray(x) for x in (a, b, c))
    if a.size == 0:
        return float("nan")
    sig = np.abs(np.mean(a)) ** 2
    return float(sig / (np.mean(b) + np.mean(c) - sig))


def bits_to_bpsk(bits) -> np.ndarray:
    """Bit 0 maps to +1 and bit 1 to -1."""
    return 1.0 - 2.0 * np.asarray(bits, dtype=float)


def code_encode(code: LinearCode, bits) -> np.ndarray:
    """Encode ``code.dimension`` bits (or a stack of them along the last axis) into BPSK symbols."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.shape[-1:] != (code.dimension,) or np.any(bits > 1):
        raise ValueError(f"expected {code.dimension} bits per word")
    if code.kind is CodeKind.REPETITION:
        word = np.repeat(bits, code.length, axis=-1)
    else:
        word = (bits @ _H74_G) % 2
    return bits_to_bpsk(word)


def code_decode(code: LinearCode, soft) -> np.ndarray:
    """Decode per-symbol soft values (positive favours bit 0; hard bits also accepted as 0/1 ints).

    Repetition: sign of the summed values. Hamming: hard decisions then syndrome correction
    of a single error.
    """
    soft = np.asarray(soft)
    if soft.shape[-1] != code.length:
        raise ValueError(f"expected {code.length} symbols per word")
    if np.issubdtype(soft.dtype, np.integer):
        soft = bits_to_bpsk(soft)
    soft = np.asarray(soft, dtype=float)
    if code.kind is CodeKind.REPETITION:
        return (np.sum(soft, axis=-1, keepdims=True) < 0).astype(np.uint8)
    hard = (soft < 0).astype(np.uint8)
    synd = (hard @ _H74_H.T) % 2
    sidx = synd @ np.array([4, 2, 1])
    flat = hard.reshape(-1, 7).copy()
    for i, s in enumerate(np.ravel(sidx)):
        if s:
            flat[i, _H74_SYNDROME[int(s)]] ^= 1
    return flat.reshape(hard.shape)[..., :4]


@dataclass
class PayloadStats:
    """Integer tallies from coherent payload trials."""

    active: int = 0
    inactive: int = 0
    missed: int = 0
    false_alarms: int = 0
    message_errors: int = 0
    bit_errors: int = 0
    bits: int = 0
    failures: int = 0

    def __iadd__(self, other: "PayloadStats") -> "PayloadStats":
        for name in self.__dataclass_fields__:
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    @property
    def message_error_rate(self) -> float:
        return self.message_errors / self.active if self.active else float("nan")

    @property
    def bit_error_rate(self) -> float:
        return self.bit_errors / self.bits if self.bits else float("nan")

    @property
    def miss_rate(self) -> float:
        return self.missed / self.active if self.active else float("nan")

    @property
    def false_alarm_rate(self) -> float:
        return self.false_alarms / self.inactive if self.inactive else float("nan")


def payload_trial(config: SystemConfig, code: LinearCode, estimator: EstimatorKind, seed,
                  amp_options: dict | None = None) -> PayloadStats:
    """One coherence interval: pilot phase of ``tau - n`` symbols, then ``n`` coded BPSK symbols.

    A device's message is in error when it is missed or any payload bit is wrong.
    """
    estimator = EstimatorKind(estimator)
    tau_p = config.coherence_len - code.length
    if tau_p < 1:
        raise ValueError("code does not fit in the coherence interval")
    cfg = config.replace(pilot_len=tau_p, info_bits=0)
    s_trial, s_bits = fresh_seed(seed).spawn(2)
    bits = np.random.default_rng(s_bits).integers(0, 2, size=(cfg.n_devices, code.dimension))
    symbols = code_encode(code, bits)
    trial = draw_trial(cfg, s_trial, data_symbols=symbols)
    real = trial.realization
    act = real.activity
    out = amp.amp_detect(trial.block, trial.book, trial.profile, cfg.activity_prob, cfg,
                         powers=real.powers, **(amp_options or {}))
    detected = np.zeros(cfg.n_devices, dtype=bool)
    detected[out.support] = True
    stats = PayloadStats(active=int(act.sum()), inactive=int((~act).sum()),
                         missed=int(np.sum(act & ~detected)), false_alarms=int(np.sum(~act & detected)))
    dev = np.flatnonzero(act & detected)
    if estimator is EstimatorKind.PERFECT:
        est = perfect_estimate(dev, real.small_scale, trial.profile)
    elif estimator is EstimatorKind.AMP:
        est = amp_estimate(out, dev, real.powers, cfg)
    else:
        # MMSE over everything declared active, then keep the truly active ones
        full = mmse_estimate(trial.block, out.support, trial.book, real.powers, trial.profile, cfg)
        keep = np.isin(full.devices, dev)
        est = ChannelEstimate(full.devices[keep], full.ghat[keep], full.gamma[keep], full.source)
    decoded = np.zeros((dev.size, code.dimension), dtype=np.uint8)
    if dev.size:
        # MRC statistic per data symbol; the positive scale 1/(gamma sqrt(M)) does not change signs
        stat = (est.ghat.conj() @ trial.block.data_obs.T).real  # (D, n)
        decoded = code_decode(code, stat)
    wrong = np.any(decoded != bits[dev], axis=1) if dev.size else np.zeros(0, bool)
    # a missed device loses all of its bits
    stats.message_errors = stats.missed + int(np.sum(wrong))
    stats.bit_errors = int(np.sum(decoded != bits[dev])) + int(np.sum(act & ~detected)) * code.dimension
    stats.bits = stats.active * code.dimension
    return stats


def simulate_coherent_payload(config: SystemConfig, code: LinearCode, estimator: EstimatorKind, n_trials: int,
                              seed: int = 0, amp_options: dict | None = None) -> PayloadStats:
    """Run ``n_trials`` independent coherence intervals and tally errors."""
    total = PayloadStats()
    for t in range(n_trials):
        total += payload_trial(config, code, estimator, np.random.SeedSequence([seed, t]), amp_options)
    return total
