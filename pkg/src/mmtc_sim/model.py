"""Physical scenario: geometry, pilot books, power control, activity and received signal.

Conventions. The pilot observation is a ``pilot_len x M`` matrix

    Y = sum_k sqrt(pilot_len * rho_k) * phi_{c(k)} g_k^T + Z,

where ``c(k)`` is the pilot column chosen by device ``k`` and ``g_k = sqrt(beta_k) h_k``.
Detectors work on ``Y / sqrt(pilot_len * rho_max)`` so that the row of the effective
channel matrix for an active device is ``sqrt(rho_k / rho_max) g_k^T`` with per-entry
variance ``beta_k * rho_k / rho_max`` (see :func:`effective_gains`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PilotKind, PowerPolicy, SystemConfig

__all__ = [
    "LargeScaleProfile",
    "PilotBook",
    "ChannelRealization",
    "ReceivedBlock",
    "Trial",
    "path_loss_db",
    "generate_geometry",
    "generate_pilots",
    "apply_power_control",
    "effective_gains",
    "sample_activity",
    "sample_channels",
    "synthesize_received",
    "draw_trial",
    "crandn",
    "fresh_seed",
]


def crandn(rng: np.random.Generator, shape, var: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples with per-entry variance ``var``."""
    scale = np.sqrt(var / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


@dataclass(frozen=True)
class LargeScaleProfile:
    betas: np.ndarray  # linear gains, shape (N,)
    positions: np.ndarray  # km, shape (N, 2), BS at origin
    beta_min: float

    @classmethod
    def from_betas(cls, betas, positions=None) -> "LargeScaleProfile":
        betas = np.asarray(betas, dtype=float)
        if np.any(betas <= 0):
            raise ValueError("large-scale gains must be positive")
        if positions is None:
            positions = np.full((betas.size, 2), np.nan)
        return cls(betas=betas, positions=np.asarray(positions, dtype=float), beta_min=float(betas.min()))


@dataclass(frozen=True)
class PilotBook:
    """Pilot matrix with ``columns_per_device`` contiguous columns owned by each device."""

    matrix: np.ndarray  # complex, (pilot_len, n_columns)
    columns_per_device: int = 1
    kind: PilotKind = PilotKind.BERNOULLI

    @property
    def pilot_len(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_columns(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_devices(self) -> int:
        return self.n_columns // self.columns_per_device

    def device_columns(self, device: int) -> slice:
        c = self.columns_per_device
        return slice(device * c, (device + 1) * c)

    def device_of_column(self) -> np.ndarray:
        return np.arange(self.n_columns) // self.columns_per_device

    def index_of_column(self) -> np.ndarray:
        return np.arange(self.n_columns) % self.columns_per_device

    def selected(self, activity, messages) -> np.ndarray:
        """Column index sent by every device (only meaningful where ``activity`` holds)."""
        return np.arange(len(activity)) * self.columns_per_device + np.asarray(messages)


@dataclass(frozen=True)
class ChannelRealization:
    small_scale: np.ndarray  # h, complex (N, M), CN(0, 1) entries
    activity: np.ndarray  # bool (N,)
    messages: np.ndarray  # int (N,), pilot index in [0, 2^r)
    powers: np.ndarray  # W (N,)

    @property
    def active_set(self) -> np.ndarray:
        return np.flatnonzero(self.activity)


@dataclass(frozen=True)
class ReceivedBlock:
    pilot_obs: np.ndarray  # (pilot_len, M)
    data_obs: np.ndarray | None = None  # (n_data, M)


def path_loss_db(distance_km):
    """Path and penetration loss in dB at ``distance_km``."""
    return 130.0 + 37.6 * np.log10(distance_km)


def generate_geometry(config: SystemConfig, seed=None) -> LargeScaleProfile:
    """Drop devices uniformly in a square cell (side ``cell_edge``, BS at the centre).

    Points closer than ``min_distance`` to the BS are rejected and redrawn.
    """
    rng = np.random.default_rng(seed)
    n = config.n_devices
    half = config.cell_edge / 2.0
    positions = np.empty((n, 2))
    filled = 0
    while filled < n:
        cand = rng.uniform(-half, half, size=(2 * (n - filled), 2))
        cand = cand[np.hypot(cand[:, 0], cand[:, 1]) >= config.min_distance]
        take = min(len(cand), n - filled)
        positions[filled : filled + take] = cand[:take]
        filled += take
    dist = np.hypot(positions[:, 0], positions[:, 1])
    betas = 10.0 ** (-path_loss_db(dist) / 10.0)
    return LargeScaleProfile(betas=betas, positions=positions, beta_min=float(betas.min()))


def generate_pilots(config: SystemConfig, seed=None, pilot_len: int | None = None) -> PilotBook:
    """Draw an i.i.d. pilot book with ``2**info_bits`` columns per device.

    Bernoulli entries are uniform over ``(+-1 +-j)/sqrt(2*tau_p)`` so every column
    has unit norm; Gaussian entries are CN(0, 1/tau_p).
    """
    rng = np.random.default_rng(seed)
    tau = config.pilot_len if pilot_len is None else pilot_len
    shape = (tau, config.n_columns)
    if config.pilot_kind is PilotKind.BERNOULLI:
        signs = rng.integers(0, 2, size=(2,) + shape) * 2 - 1
        matrix = (signs[0] + 1j * signs[1]) / np.sqrt(2.0 * tau)
    else:
        matrix = crandn(rng, shape, 1.0 / tau)
    return PilotBook(matrix=matrix, columns_per_device=config.columns_per_device, kind=config.pilot_kind)


def apply_power_control(profile: LargeScaleProfile, config: SystemConfig) -> np.ndarray:
    """Per-device transmit powers in W."""
    if config.power_policy is PowerPolicy.SCI:
        return config.max_ul_power * profile.beta_min / profile.betas
    return np.full(profile.betas.shape, config.max_ul_power)


def effective_gains(profile: LargeScaleProfile, powers, config: SystemConfig) -> np.ndarray:
    """Per-entry variance of an active device's effective channel row, ``beta_k rho_k / rho_max``."""
    return profile.betas * np.asarray(powers) / config.max_ul_power


def sample_activity(config: SystemConfig, seed=None):
    """Return ``(activity, messages)``.

    Each device is active independently with probability ``activity_prob``, unless
    ``config.n_active`` fixes the number of active devices. Messages are uniform over
    ``[0, 2**info_bits)`` for every device; they only matter where the device is active.
    """
    rng = np.random.default_rng(seed)
    n = config.n_devices
    if config.n_active is None:
        activity = rng.random(n) < config.activity_prob
    else:
        activity = np.zeros(n, dtype=bool)
        activity[rng.choice(n, size=config.n_active, replace=False)] = True
    messages = rng.integers(0, config.columns_per_device, size=n)
    return activity, messages


def sample_channels(config: SystemConfig, seed=None) -> np.ndarray:
    """Small-scale fading ``h`` with i.i.d. CN(0, 1) entries, shape ``(N, M)``."""
    return crandn(np.random.default_rng(seed), (config.n_devices, config.n_antennas))


def synthesize_received(
    book: PilotBook,
    profile: LargeScaleProfile,
    real: ChannelRealization,
    config: SystemConfig,
    seed=None,
    data_symbols=None,
    noise_power: float | None = None,
) -> ReceivedBlock:
    """Superpose the selected pilots of the active devices and add receiver noise.

    ``data_symbols`` (shape ``(N, n_data)``) optionally adds a data phase in which each
    active device sends its symbols with the pilot-phase power. ``noise_power``
    overrides ``config.noise_power`` (0 gives noiseless observations).
    """
    n, m = real.small_scale.shape
    if book.n_devices != n or profile.betas.shape != (n,) or m != config.n_antennas:
        raise ValueError(
            f"shape mismatch: book has {book.n_devices} devices, profile {profile.betas.shape[0]}, "
            f"channels {real.small_scale.shape}, config M={config.n_antennas}"
        )
    rng = np.random.default_rng(seed)
    sigma2 = config.noise_power if noise_power is None else noise_power
    tau_p = book.pilot_len
    act = real.active_set
    g = np.sqrt(profile.betas[act])[:, None] * real.small_scale[act]
    amp = np.sqrt(tau_p * real.powers[act])
    cols = book.selected(real.activity, real.messages)[act]
    pilot = book.matrix[:, cols] @ (amp[:, None] * g)
    noise = crandn(rng, pilot.shape, sigma2)
    data = None
    if data_symbols is not None:
        syms = np.asarray(data_symbols)[act]  # (K, n_data)
        data = (syms * np.sqrt(real.powers[act])[:, None]).T @ g
        data = data + crandn(rng, data.shape, sigma2)
    return ReceivedBlock(pilot_obs=pilot + noise, data_obs=data)


@dataclass(frozen=True)
class Trial:
    config: SystemConfig
    profile: LargeScaleProfile
    book: PilotBook
    realization: ChannelRealization
    block: ReceivedBlock


def fresh_seed(seed) -> np.random.SeedSequence:
    """A SeedSequence equal to ``seed`` but with no children spawned yet.

    ``SeedSequence.spawn`` is stateful; copying keeps repeated calls with the same seed
    object reproducible.
    """
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key, pool_size=seed.pool_size)
    return np.random.SeedSequence(seed)


def draw_trial(config: SystemConfig, seed=None, data_symbols=None, noise_power=None) -> Trial:
    """Generate one complete trial from a single seed (independent child streams per stage)."""
    s_geo, s_pil, s_act, s_ch, s_noise = fresh_seed(seed).spawn(5)
    profile = generate_geometry(config, s_geo)
    book = generate_pilots(config, s_pil)
    activity, messages = sample_activity(config, s_act)
    real = ChannelRealization(
        small_scale=sample_channels(config, s_ch),
        activity=activity,
        messages=messages,
        powers=apply_power_control(profile, config),
    )
    syms = data_symbols(activity, messages) if callable(data_symbols) else data_symbols
    block = synthesize_received(book, profile, real, config, s_noise, data_symbols=syms, noise_power=noise_power)
    return Trial(config, profile, book, real, block)
