import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scmdetect.spectral import FrequencyGrid
from scmdetect.rmt import gamma_spectrum
from scmdetect.tsgen import (
    ArRankOne,
    BlockFormatError,
    FirRandomSphere,
    NoiseModel,
    SimulationConfig,
    TimeSeriesBlock,
    complex_normal,
    generate_mixture,
    generate_noise,
    generate_signal,
    read_block,
    solve_amplitude_for_target_gamma,
    substream,
    with_target_gamma,
    write_block,
)

BETA = 10 / 11


def ar_noise_var(theta, variance=1.0):
    return variance / (1 - theta**2)


# ---------------------------------------------------------------- noise


def test_white_noise_degenerate_case():
    y = generate_noise(NoiseModel.ar1(0.0, 4), 20000, seed=1).samples
    var = np.mean(np.abs(y) ** 2, axis=1)
    assert np.allclose(var, 1.0, atol=4 * np.sqrt(1 / 20000))
    corr = (y @ y.conj().T) / 20000
    off = np.abs(corr[~np.eye(4, dtype=bool)])
    assert off.max() < 5 / np.sqrt(20000)


def test_ar1_stationary_variance():
    theta, N, M = 0.5, 100_000, 4
    y = generate_noise(NoiseModel.ar1(theta, M), N, seed=7).samples
    sigma2 = ar_noise_var(theta)
    # var of the mean of |v|^2 for circular AR(1): sigma^4 (1 + theta^2) / (1 - theta^2) / N
    se = np.sqrt(sigma2**2 * (1 + theta**2) / (1 - theta**2) / N / M)
    assert abs(np.mean(np.abs(y) ** 2) - 4 / 3) < 3 * se


def test_ar1_lagged_autocovariance():
    theta, N = 0.5, 100_000
    y = generate_noise(NoiseModel.ar1(theta, 1), N, seed=11).samples[0]
    sigma2 = ar_noise_var(theta)
    se = np.sqrt(sigma2**2 * (1 + theta**2) / (1 - theta**2) / N)
    for k in range(11):
        est = np.mean(y[k:] * y[: N - k].conj())
        assert abs(est.real - sigma2 * theta**k) < 4 * se, k
        assert abs(est.imag) < 4 * se, k


def test_ar1_spectral_density_at_zero():
    theta, N, M, reps = 0.5, 256, 8, 400
    vals = []
    for r in range(reps):
        y = generate_noise(NoiseModel.ar1(theta, M), N, seed=(5, r)).samples
        vals.append(np.abs(y.sum(axis=1)) ** 2 / N)
    vals = np.concatenate(vals)
    # finite-N expectation of the periodogram at 0 is within O(1/N) of s(0) = 4
    assert abs(vals.mean() - 4.0) < 4 * 4.0 / np.sqrt(vals.size) + 0.05


def test_stationary_start():
    # first sample already has the stationary variance (no burn-in transient)
    theta = 0.9
    first = np.concatenate(
        [generate_noise(NoiseModel.ar1(theta, 50), 3, seed=(2, r)).samples[:, 0] for r in range(200)]
    )
    assert abs(np.mean(np.abs(first) ** 2) / ar_noise_var(theta) - 1) < 0.06


def test_per_channel_coefficients():
    model = NoiseModel(theta=(0.0, 0.5, -0.8))
    assert model.channel_count == 3
    s = model.spectral_density([0.0, 0.5])
    assert np.allclose(s[0], [1.0, 4.0, 1 / 3.24])
    assert np.allclose(s[1], [1.0, 1 / 2.25, 1 / 0.04])
    assert np.allclose(model.autocovariance(2), [0.0, 0.25 / 0.75, 0.64 / 0.36])


def test_spatially_uncorrelated_under_h0():
    for N in (1000, 16000):
        y = generate_noise(NoiseModel.ar1(0.5, 10), N, seed=N).samples
        y = y / np.sqrt(np.mean(np.abs(y) ** 2, axis=1, keepdims=True))
        corr = (y @ y.conj().T) / N
        off = np.abs(corr[~np.eye(10, dtype=bool)]).mean()
        assert off < 3 / np.sqrt(N)


def test_channels_use_disjoint_streams():
    y = generate_noise(NoiseModel.ar1(0.0, 3), 64, seed=0).samples
    assert not np.allclose(y[0], y[1])
    # growing M keeps the existing channels unchanged
    y4 = generate_noise(NoiseModel.ar1(0.0, 4), 64, seed=0).samples
    assert np.array_equal(y, y4[:3])


@pytest.mark.parametrize("bad", [1.0, -1.0, 1.5])
def test_noise_rejects_nonstationary(bad):
    with pytest.raises(ValueError):
        NoiseModel.ar1(bad, 3)


def test_noise_rejects_bad_length():
    with pytest.raises(ValueError):
        generate_noise(NoiseModel.ar1(0.5, 2), 0, seed=0)


@settings(max_examples=25, deadline=None)
@given(
    theta=st.floats(-0.95, 0.95),
    M=st.integers(1, 5),
    N=st.integers(1, 64),
    seed=st.integers(0, 2**32),
)
def test_generation_is_deterministic(theta, M, N, seed):
    model = NoiseModel.ar1(theta, M)
    a = generate_noise(model, N, seed).samples
    b = generate_noise(model, N, seed).samples
    assert a.tobytes() == b.tobytes()
    assert a.shape == (M, N) and np.all(np.isfinite(a))


def test_complex_normal_convention():
    z = complex_normal(substream(3), 200_000)
    assert abs(np.var(z.real) - 0.5) < 0.01
    assert abs(np.var(z.imag) - 0.5) < 0.01
    assert abs(np.mean(z.real * z.imag)) < 0.01
    assert abs(np.mean(np.abs(z) ** 2) - 1) < 0.01


# ---------------------------------------------------------------- signal


def test_zero_amplitude_signal_is_zero():
    u = generate_signal(ArRankOne(0.0, BETA), 100, 5, seed=1).samples
    assert not np.any(u)
    u = generate_signal(FirRandomSphere(3, (0.0, 0.0)), 100, 5, seed=1).samples
    assert not np.any(u)


def test_ar_rank_one_common_factor():
    u = generate_signal(ArRankOne(0.3, BETA), 500, 6, seed=2).samples
    assert np.allclose(u, u[0][None, :])
    rho = np.vdot(u[0], u[3]) / (np.linalg.norm(u[0]) * np.linalg.norm(u[3]))
    assert abs(abs(rho) - 1) < 1e-12


def test_ar_rank_one_power():
    C, M, N = 0.05, 60, 100_000
    u = generate_signal(ArRankOne(C, BETA), N, M, seed=3).samples
    power = np.mean(np.sum(np.abs(u) ** 2, axis=0))
    expected = C / (1 - BETA**2)
    assert abs(expected - 0.288) < 1e-3
    sa2 = 1 / (1 - BETA**2)
    se = C * np.sqrt(sa2**2 * (1 + BETA**2) / (1 - BETA**2) / N)
    assert abs(power - expected) < 3 * se


def test_mixture_snr_scaling():
    M, N = 60, 100_000
    noise = NoiseModel.ar1(0.5, M)
    sig = ArRankOne(0.05, BETA)
    ratio = sig.total_power() / (M * ar_noise_var(0.5))
    assert abs(ratio - 3.6e-3) < 1e-4
    u = generate_signal(sig, N, M, seed=9).samples
    v = generate_noise(noise, N, seed=9).samples
    est = np.mean(np.abs(u) ** 2) / np.mean(np.abs(v) ** 2)
    assert abs(est / ratio - 1) < 0.1


def test_mixture_without_signal_matches_noise_exactly():
    noise = NoiseModel.ar1(0.5, 4)
    v = generate_noise(noise, 128, seed=(1, 2)).samples
    assert np.array_equal(generate_mixture(noise, None, 128, (1, 2)).samples, v)
    assert np.array_equal(generate_mixture(noise, ArRankOne(0.0, BETA), 128, (1, 2)).samples, v)
    u = generate_signal(ArRankOne(0.2, BETA), 128, 4, seed=(1, 2)).samples
    assert np.allclose(generate_mixture(noise, ArRankOne(0.2, BETA), 128, (1, 2)).samples, u + v)


def test_fir_lag_covariance():
    M, K, L, N = 3, 1, 1, 200_000
    sig = FirRandomSphere(L, (1.0,), sphere_seed=4)
    taps = sig.taps(M)
    u = generate_signal(sig, N, M, seed=5).samples
    for lag in range(L + 2):
        est = u[:, lag:] @ u[:, : N - lag].conj().T / (N - lag)
        exact = sum(taps[j + lag] @ taps[j].conj().T for j in range(L + 1 - lag)) if lag <= L else 0
        assert np.abs(est - exact).max() < 0.03, lag


def test_fir_sphere_directions():
    sig = FirRandomSphere(3, (2.0, 0.5), sphere_seed=(1, 2))
    w = sig.directions(20)
    assert w.shape == (4, 20, 2)
    assert np.allclose(np.linalg.norm(w, axis=1), 1.0)
    taps = sig.taps(20)
    assert np.allclose(np.linalg.norm(taps, axis=1) ** 2, [2.0, 0.5])
    # same seed, same filter; different seed, different filter
    assert np.array_equal(taps, FirRandomSphere(3, (2.0, 0.5), sphere_seed=(1, 2)).taps(20))
    assert not np.allclose(taps, sig.reseeded(3).taps(20))


@pytest.mark.parametrize("M,K,L", [(20, 2, 3), (6, 2, 3), (5, 3, 0), (3, 1, 4)])
def test_fir_rank_property(M, K, L):
    sig = FirRandomSphere(L, tuple(np.linspace(2, 1, K)), sphere_seed=M)
    taps = sig.taps(M)
    stacked = np.concatenate(list(taps), axis=1)
    assert np.linalg.matrix_rank(stacked) == min(K * (L + 1), M)
    H = sig.transfer(np.linspace(0, 1, 7, endpoint=False), M)
    assert all(np.linalg.matrix_rank(h) <= K for h in H)


def test_fir_transfer_matches_tap_sum():
    sig = FirRandomSphere(2, (1.0,), sphere_seed=1)
    taps = sig.taps(4)
    nu = 0.3
    manual = sum(taps[l] * np.exp(-2j * np.pi * nu * l) for l in range(3))
    assert np.allclose(sig.transfer([nu], 4)[0], manual)


def test_signal_model_validation():
    with pytest.raises(ValueError):
        ArRankOne(-0.1, 0.5)
    with pytest.raises(ValueError):
        ArRankOne(0.1, 1.0)
    with pytest.raises(ValueError):
        FirRandomSphere(3, (1.0, 2.0))
    with pytest.raises(ValueError):
        FirRandomSphere(-1, (1.0,))
    with pytest.raises(ValueError):
        generate_signal(FirRandomSphere(1, (1.0, 1.0, 1.0)), 10, 2, seed=0)
    with pytest.raises(ValueError):
        generate_mixture(NoiseModel.ar1(0.5, 2), FirRandomSphere(1, (1.0, 1.0, 1.0)), 10, 0)


# ---------------------------------------------------------------- amplitude solving


def test_amplitude_for_gamma_zero_frequency():
    noise = NoiseModel.ar1(0.5, 60)
    grid = FrequencyGrid(3600)
    C = solve_amplitude_for_target_gamma(noise, ArRankOne(1.0, BETA), 1.5125, grid)
    assert abs(C - 0.05) < 1e-14
    C = solve_amplitude_for_target_gamma(noise, ArRankOne(1.0, BETA), 2 * np.sqrt(0.5), grid)
    assert abs(C - 1.4142135623730951 / 30.25) < 1e-15
    assert abs(C - 0.046751) < 1e-6
    assert solve_amplitude_for_target_gamma(noise, ArRankOne(1.0, BETA), 0.0, grid) == 0.0


def test_amplitude_fir_numeric_solution():
    noise = NoiseModel.ar1(0.5, 40)
    grid = FrequencyGrid(1600)
    sig = with_target_gamma(noise, FirRandomSphere(3, (1.0, 0.25), sphere_seed=3), 1.4, grid, k_sum=2)
    spec = gamma_spectrum(noise, sig, grid, k_max=2)
    assert abs(spec.peak_sum() / 1.4 - 1) < 1e-10
    assert abs(sig.amplitudes[0] / sig.amplitudes[1] - 4) < 1e-12
    sig1 = with_target_gamma(noise, FirRandomSphere(3, (1.0,), sphere_seed=3), 2.0, grid)
    assert abs(gamma_spectrum(noise, sig1, grid).peak() / 2.0 - 1) < 1e-10


def test_amplitude_rejects_zero_filter():
    noise = NoiseModel.ar1(0.5, 8)
    with pytest.raises(ValueError):
        solve_amplitude_for_target_gamma(noise, FirRandomSphere(1, (0.0,)), 1.0, FrequencyGrid(64))
    with pytest.raises(ValueError):
        solve_amplitude_for_target_gamma(noise, ArRankOne(1.0, 0.5), -1.0, FrequencyGrid(64))


# ---------------------------------------------------------------- I/O


def test_simulation_config_roundtrip():
    cfg = SimulationConfig(
        noise=NoiseModel.ar1(0.5, 3),
        signal=FirRandomSphere(3, (1.0, 0.5), sphere_seed=(4, 5)),
        N=64,
        seed=9,
    )
    back = SimulationConfig.loads(cfg.dumps())
    assert back == cfg
    d = cfg.to_dict()
    assert d["noise"]["theta"] == 0.5 and d["signal"]["L"] == 3
    assert np.array_equal(back.generate().samples, cfg.generate().samples)


def test_simulation_config_validation():
    base = {"M": 2, "N": 8, "noise": {"theta": 0.2}}
    SimulationConfig.from_dict(base)
    with pytest.raises(ValueError):
        SimulationConfig.from_dict({**base, "spec_version": 2})
    with pytest.raises(ValueError):
        SimulationConfig.from_dict({**base, "noise": {"theta": [0.1, 0.2, 0.3]}})
    with pytest.raises(ValueError):
        SimulationConfig.from_dict({**base, "signal": {"variant": "fir_random_sphere", "L": 1, "amplitudes": [1, 1, 1]}})


def test_block_roundtrip(tmp_path):
    block = generate_noise(NoiseModel.ar1(0.3, 3), 17, seed=2)
    path = tmp_path / "b.scdb"
    write_block(path, block)
    raw = path.read_bytes()
    assert raw[:5] == b"SCDB1" and len(raw) == 5 + 4 + 8 + 16 * 3 * 17
    assert int.from_bytes(raw[5:9], "little") == 3
    assert int.from_bytes(raw[9:17], "little") == 17
    assert np.frombuffer(raw[17:33], "<f8")[0] == block.samples[0, 0].real
    assert np.array_equal(read_block(path).samples, block.samples)


def test_block_errors(tmp_path):
    block = generate_noise(NoiseModel.ar1(0.3, 2), 8, seed=2)
    path = tmp_path / "b.scdb"
    write_block(path, block)
    raw = path.read_bytes()
    (tmp_path / "short").write_bytes(raw[:-3])
    (tmp_path / "magic").write_bytes(b"XXXXX" + raw[5:])
    (tmp_path / "tiny").write_bytes(raw[:4])
    for name in ("short", "magic", "tiny"):
        with pytest.raises(BlockFormatError):
            read_block(tmp_path / name)


def test_block_validation():
    with pytest.raises(ValueError):
        TimeSeriesBlock(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        TimeSeriesBlock(np.zeros(4))
