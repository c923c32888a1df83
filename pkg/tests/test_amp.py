import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtc_sim import amp, model
from mmtc_sim.config import SystemConfig
from mmtc_sim.model import PilotBook, crandn


def _wirtinger_fd(fn, x, h):
    m = x.shape[-1]
    out = 0.0 + 0.0j
    for j in range(m):
        e = np.zeros(m, complex)
        e[j] = h
        dre = (fn(x + e)[j] - fn(x - e)[j]) / (2 * h)
        dim = (fn(x + 1j * e)[j] - fn(x - 1j * e)[j]) / (2 * h)
        out += 0.5 * (dre - 1j * dim)
    return out / m


def test_eps_one_is_linear_mmse():
    rng = np.random.default_rng(0)
    x = crandn(rng, (50, 6))
    beta = rng.uniform(0.1, 3, 50)
    np.testing.assert_array_equal(amp.denoise(x, beta, 1.0, 0.3), (beta / (beta + 0.3))[:, None] * x)
    np.testing.assert_allclose(amp.denoiser_divergence(x, beta, 1.0, 0.3), beta / (beta + 0.3), rtol=1e-15)


def test_zero_input():
    x = np.zeros(5, complex)
    assert np.all(amp.denoise(x, 1.0, 0.1, 0.2) == 0)
    v0 = 1 / (1 + (0.9 / 0.1) * (1 + 1 / 0.2) ** 5)
    assert amp.denoiser_divergence(x, 1.0, 0.1, 0.2) == pytest.approx(v0 / 1.2, rel=1e-12)


def test_large_input_saturates():
    beta, mu2, eps, m = 1.0, 0.1, 0.5, 4
    grid = np.linspace(0, 10, 20001)
    v = amp.activity_posterior(grid, beta, eps, mu2, m)
    crossing = grid[np.argmax(v > 0.999)]
    rng = np.random.default_rng(1)
    for e in rng.uniform(crossing, 100, 50):
        x = crandn(rng, (m,))
        x *= np.sqrt(e) / np.linalg.norm(x)
        assert amp.activity_posterior(e, beta, eps, mu2, m) > 0.999
        np.testing.assert_allclose(amp.denoise(x, beta, eps, mu2), beta / (beta + mu2) * x, rtol=1e-3)


@pytest.mark.parametrize("m", [2, 8, 32])
def test_divergence_matches_finite_differences(m):
    rng = np.random.default_rng(m)
    for _ in range(34):
        beta, mu2, eps = rng.uniform(0.1, 5), rng.uniform(0.05, 1), rng.uniform(0.02, 0.9)
        r = np.sqrt(m * mu2 * (beta + mu2) / beta * np.log1p(beta / mu2)) * rng.uniform(0.8, 1.2)
        x = crandn(rng, (m,))
        x *= r / np.linalg.norm(x)
        fd = _wirtinger_fd(lambda z: amp.denoise(z, beta, eps, mu2), x, 1e-5 * r)
        cf = amp.denoiser_divergence(x, beta, eps, mu2)
        assert abs(fd - cf) / cf < 1e-4


def test_divergence_spec_point():
    rng = np.random.default_rng(7)
    x = crandn(rng, (8,), 0.5)
    fn = lambda z: amp.denoise(z, 1.0, 0.1, 0.2)  # noqa: E731
    assert _wirtinger_fd(fn, x, 1e-5).real == pytest.approx(amp.denoiser_divergence(x, 1.0, 0.1, 0.2), rel=1e-4)


@settings(max_examples=200, deadline=None)
@given(
    energy=st.floats(0, 50),
    beta=st.floats(0.01, 10),
    eps=st.floats(0.001, 0.999),
    mu2=st.floats(0.05, 5),
    m=st.integers(1, 8),
)
def test_log_domain_posterior_matches_direct(energy, beta, eps, mu2, m):
    x = np.zeros(m, complex)
    x[0] = np.sqrt(energy)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        direct = amp.activity_posterior_direct(x, beta, eps, mu2)
    if np.isfinite(direct) and direct > 1e-300:
        assert amp.activity_posterior(energy, beta, eps, mu2, m) == pytest.approx(direct, rel=1e-10)


def test_log_domain_survives_large_m():
    v = amp.activity_posterior(np.array([0.0, 1e6]), 1.0, 0.05, 0.01, 4096)
    assert np.all(np.isfinite(v)) and v[0] == 0.0 and v[1] == 1.0


def test_denoiser_rejects_bad_input():
    with pytest.raises(ValueError):
        amp.denoise(np.ones(3), 1.0, 0.1, 0.0)
    with pytest.raises(ValueError):
        amp.denoise(np.array([np.nan, 1.0]), 1.0, 0.1, 0.1)
    with pytest.raises(ValueError):
        amp.denoise(np.ones(3), 1.0, 0.0, 0.1)


def test_noise_state_empirical():
    assert amp.update_noise_state(np.zeros((4, 3))) == 0.0
    r = crandn(np.random.default_rng(2), (10, 10))
    assert amp.update_noise_state(r) == pytest.approx(1.0, rel=0.1)


def test_noise_state_evolution_vanishing_activity():
    gains = np.full(100, 2.0)
    mu2 = amp.update_noise_state(np.zeros((10, 4)), amp.NoiseMode.STATE_EVOLUTION, noise_var=0.05, mu2=0.5,
                                 gains=gains, eps=1e-6, seed=0, n_samples=20_000)
    assert mu2 == pytest.approx(0.05, rel=1e-3)


def _dft_book(t):
    return PilotBook(np.fft.fft(np.eye(t)) / np.sqrt(t))


def test_zero_observation_is_fixed_point():
    phi = _dft_book(8).matrix
    state = amp.AmpState(np.zeros((8, 3), complex), np.zeros((8, 3), complex), 0.1)
    new = amp.amp_iterate(state, np.zeros((8, 3), complex), phi, amp.mmse_denoiser(np.ones(8), 0.2), noise_var=0.01)
    assert np.all(new.estimates == 0) and np.all(new.residual == 0)


def test_single_device_noiseless_first_iteration_and_support():
    t, m = 8, 6
    phi = _dft_book(t).matrix
    gains = np.full(t, 2.0)
    x = np.zeros((t, m), complex)
    x[3] = crandn(np.random.default_rng(3), (m,), 2.0)
    y = phi @ x
    den = amp.mmse_denoiser(gains, 0.2)
    mu0 = amp.initial_noise_state(gains, 0.2, 1e-6, t)
    state = amp.AmpState(np.zeros_like(x), y.copy(), mu0)
    new = amp.amp_iterate(state, y, phi, den, noise_var=1e-6)
    # orthogonal pilots: the matched filter returns x exactly
    np.testing.assert_allclose(new.estimates, amp.denoise(x, gains, 0.2, mu0), atol=1e-12)
    state, pseudo, _, _ = amp.run_amp(y, phi, den, mu0, 1e-6)
    v = amp.activity_posterior(np.sum(np.abs(pseudo) ** 2, axis=1), gains, 0.2, state.noise_state, m)
    np.testing.assert_array_equal(np.flatnonzero(v >= 0.5), [3])


def test_eps_one_matches_linear_recursion():
    rng = np.random.default_rng(4)
    t, n, m = 12, 30, 4
    phi = crandn(rng, (t, n), 1.0 / t)
    gains = rng.uniform(0.5, 2, n)
    y = phi @ (crandn(rng, (n, m)) * np.sqrt(gains)[:, None]) + crandn(rng, (t, m), 0.01)
    mu0 = amp.initial_noise_state(gains, 1.0, 0.01, t)
    state, _, _, _ = amp.run_amp(y, phi, amp.mmse_denoiser(gains, 1.0), mu0, 0.01, n_iters=15, tol=None, damping=0.0,
                                 adaptive=False)
    x, r, mu2 = np.zeros((n, m), complex), y.copy(), mu0
    for _ in range(15):
        s = gains / (gains + mu2)
        x_new = s[:, None] * (phi.conj().T @ r + x)
        r = y - phi @ x_new + (n / t) * np.mean(s) * r
        x = x_new
        mu2 = np.sum(np.abs(r) ** 2) / (t * m)
    np.testing.assert_allclose(state.estimates, x, atol=1e-9)


def test_divergence_error_raised():
    rng = np.random.default_rng(6)
    t, n, m = 5, 10, 2
    phi = crandn(rng, (t, n), 1.0 / t)
    y = crandn(rng, (t, m))

    def exploding(u, mu2):
        return 1e4 * u, np.zeros(u.shape[0]), np.ones(u.shape[0])

    with pytest.raises(amp.AmpDivergenceError, match="diverged"):
        amp.run_amp(y, phi, exploding, 1.0, 1e-3, damping=0.0, adaptive=False)


def test_damping_validation():
    with pytest.raises(ValueError):
        amp.run_amp(np.ones((2, 1)), np.eye(2), amp.mmse_denoiser(np.ones(2), 0.5), 1.0, 0.1, damping=1.0)


def test_decide_activity_modes():
    assert not amp.decide_activity(np.zeros(4), 1.0, 0.1, 0.1, amp.Decision.ENERGY)
    assert amp.decide_activity(np.zeros(4), 1.0, 1.0, 0.1, amp.Decision.POSTERIOR)
    rng = np.random.default_rng(5)
    x = crandn(rng, (100_000, 128), 1.1)
    miss = 1 - np.mean(amp.decide_activity(x, 1.0, 0.5, 0.1, amp.Decision.ENERGY))
    assert miss < 1e-3
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        amp.decide_activity(np.ones(4), 1.0, 0.1, 0.1, amp.Decision.ENERGY, zeta=100.0)
    assert any("outside the admissible interval" in str(w.message) for w in caught)


def _fig2_trials(n_trials, tau_p=15):
    cfg = SystemConfig(n_devices=200, n_antennas=20, pilot_len=tau_p, activity_prob=0.05)
    return cfg, [model.draw_trial(cfg, [11, t]) for t in range(n_trials)]


def _errors(cfg, trials, **kw):
    errors = 0
    for tr in trials:
        out = amp.amp_detect(tr.block, tr.book, tr.profile, cfg.activity_prob, cfg, decision=amp.Decision.ENERGY,
                             **kw)
        det = np.zeros(cfg.n_devices, bool)
        det[out.support] = True
        errors += np.sum(det != tr.realization.activity)
    return errors


def test_onsager_term_helps():
    cfg, trials = _fig2_trials(150)
    with_term = _errors(cfg, trials)
    without = _errors(cfg, trials, onsager=False)
    n = len(trials) * cfg.n_devices
    se = np.sqrt(with_term + without) / n
    assert (without - with_term) / n > 3 * se


def test_inactive_estimates_shrink():
    cfg, trials = _fig2_trials(30, tau_p=20)
    norms = np.zeros(16)
    for tr in trials:
        y = tr.block.pilot_obs / np.sqrt(cfg.pilot_len * cfg.max_ul_power)
        gains = tr.profile.betas
        den = amp.mmse_denoiser(gains, cfg.activity_prob)
        mu0 = amp.initial_noise_state(gains, cfg.activity_prob, cfg.noise_var_effective, cfg.pilot_len)
        state = amp.AmpState(np.zeros((cfg.n_devices, cfg.n_antennas), complex), y.copy(), mu0,
                             damping=amp.DEFAULT_DAMPING)
        inactive = ~tr.realization.activity
        for t in range(16):
            state = amp.amp_iterate(state, y, tr.book.matrix, den, noise_var=cfg.noise_var_effective)
            norms[t] += np.mean(np.sum(np.abs(state.estimates[inactive]) ** 2, axis=1) / gains[inactive])
    assert norms[15] < norms[7] < norms[3] < norms[0]


def test_empirical_noise_state_close_to_state_evolution():
    cfg = SystemConfig(n_devices=500, n_antennas=32, pilot_len=40, activity_prob=0.05, power_policy="sci")
    tr = model.draw_trial(cfg, 21)
    gains = model.effective_gains(tr.profile, tr.realization.powers, cfg)
    out = amp.amp_detect(tr.block, tr.book, tr.profile, cfg.activity_prob, cfg, powers=tr.realization.powers)
    mu2 = amp.initial_noise_state(gains, cfg.activity_prob, cfg.noise_var_effective, cfg.pilot_len)
    for t in range(60):
        mu2 = amp.update_noise_state(np.zeros((cfg.pilot_len, cfg.n_antennas)), amp.NoiseMode.STATE_EVOLUTION,
                                     noise_var=cfg.noise_var_effective, mu2=mu2, gains=gains,
                                     eps=cfg.activity_prob, seed=t, n_samples=20_000)
    assert 0.5 < out.noise_state / mu2 < 2.0


def test_detect_noiseless_orthogonal():
    cfg = SystemConfig(n_devices=16, n_antennas=4, pilot_len=16, coherence_len=16, n_active=6)
    tr = model.draw_trial(cfg, 8)
    book = _dft_book(16)
    blk = model.synthesize_received(book, tr.profile, tr.realization, cfg, noise_power=0.0)
    for decision in amp.Decision:
        out = amp.amp_detect(blk, book, tr.profile, 0.3, cfg, decision=decision)
        np.testing.assert_array_equal(out.support, tr.realization.active_set)


def test_diagnostics_csv():
    cfg = SystemConfig(n_devices=40, n_antennas=4, pilot_len=10, activity_prob=0.1)
    tr = model.draw_trial(cfg, 1)
    out = amp.amp_detect(tr.block, tr.book, tr.profile, 0.1, cfg)
    lines = amp.diagnostics_csv(out).splitlines()
    assert lines[0] == "iteration,residual_fro,mu2"
    assert len(lines) == out.iterations + 2
    assert float(lines[-1].split(",")[2]) == out.noise_state
