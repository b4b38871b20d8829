"""Synthetic multichannel Gaussian time series.

Noise is a set of mutually independent circular complex AR(1) channels; the
optional signal is the output of a rank-K MIMO filter driven by complex white
noise. Every draw is a pure function of ``(model, n_samples, seed)``.

Seeds are either a non-negative integer or a tuple of them (the harness uses
``(master, row, hypothesis, trial)``). Independent substreams are derived from a
seed with :class:`numpy.random.SeedSequence` spawn keys, so the noise of channel
``m`` never shares random numbers with another channel or with the signal.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from scipy.signal import lfilter

__all__ = [
    "NoiseModel",
    "ArRankOne",
    "FirRandomSphere",
    "SignalModel",
    "TimeSeriesBlock",
    "SimulationConfig",
    "BlockFormatError",
    "substream",
    "complex_normal",
    "generate_noise",
    "generate_signal",
    "generate_mixture",
    "solve_amplitude_for_target_gamma",
    "with_target_gamma",
    "signal_from_dict",
    "signal_to_dict",
    "write_block",
    "read_block",
]

Seed = Union[int, Sequence[int]]

NOISE_STREAM = 0
SIGNAL_STREAM = 1
SPHERE_STREAM = 2

BLOCK_MAGIC = b"SCDB1"
_BLOCK_HEADER = struct.Struct("<5sIQ")


class BlockFormatError(ValueError):
    """Raised when a block file is truncated or carries the wrong magic."""


def _entropy(seed: Seed):
    if isinstance(seed, (int, np.integer)):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        return int(seed)
    parts = [int(s) for s in seed]
    if any(p < 0 for p in parts):
        raise ValueError(f"seed components must be non-negative, got {parts}")
    return parts


def substream(seed: Seed, *key: int) -> np.random.Generator:
    """Independent generator for ``seed`` and the spawn path ``key``."""
    ss = np.random.SeedSequence(_entropy(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def complex_normal(rng: np.random.Generator, size, variance: float = 1.0) -> np.ndarray:
    """Circular complex Gaussian draws with ``E|z|^2 = variance``.

    Real and imaginary parts are independent with variance ``variance / 2``.
    """
    size = (size,) if np.isscalar(size) else tuple(size)
    parts = rng.standard_normal((2,) + size)
    z = parts[0] + 1j * parts[1]
    z *= np.sqrt(variance / 2.0)
    return z


def _steering(nu) -> np.ndarray:
    return np.exp(-2j * np.pi * np.asarray(nu, dtype=float))


# ---------------------------------------------------------------- models


@dataclass(frozen=True)
class NoiseModel:
    """Spatially white noise: one AR(1) process per channel.

    ``v[m, n] = theta[m] * v[m, n-1] + e[m, n]`` with
    ``e ~ N_C(0, variance)``.
    """

    theta: tuple
    variance: float = 1.0

    def __post_init__(self):
        theta = tuple(float(t) for t in np.atleast_1d(self.theta))
        object.__setattr__(self, "theta", theta)
        if len(theta) == 0:
            raise ValueError("NoiseModel needs at least one channel")
        if any(not abs(t) < 1.0 for t in theta):
            raise ValueError(f"AR coefficients must satisfy |theta| < 1, got {theta}")
        if not self.variance > 0:
            raise ValueError(f"innovation variance must be positive, got {self.variance}")

    @classmethod
    def ar1(cls, theta: float, channel_count: int, variance: float = 1.0) -> "NoiseModel":
        """Common coefficient ``theta`` on every one of ``channel_count`` channels."""
        if channel_count < 1:
            raise ValueError(f"channel_count must be >= 1, got {channel_count}")
        return cls(theta=(float(theta),) * int(channel_count), variance=variance)

    @property
    def channel_count(self) -> int:
        return len(self.theta)

    @property
    def is_common(self) -> bool:
        return len(set(self.theta)) == 1

    def spectral_density(self, nu) -> np.ndarray:
        """``s_m(nu)`` with shape ``(len(nu), M)``."""
        z = _steering(np.atleast_1d(nu))[:, None]
        theta = np.asarray(self.theta)[None, :]
        return self.variance / np.abs(1.0 - theta * z) ** 2

    def autocovariance(self, lag: int) -> np.ndarray:
        """``r_m(lag)`` for every channel."""
        theta = np.asarray(self.theta)
        return self.variance * theta ** abs(int(lag)) / (1.0 - theta**2)

    def with_channels(self, channel_count: int) -> "NoiseModel":
        if not self.is_common:
            raise ValueError("cannot resize a noise model with per-channel coefficients")
        return NoiseModel.ar1(self.theta[0], channel_count, self.variance)

    def to_dict(self) -> dict:
        theta = self.theta[0] if self.is_common else list(self.theta)
        return {"theta": theta, "variance": self.variance}

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(
            {"theta": list(self.theta), "variance": self.variance}, sort_keys=True
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class ArRankOne:
    """Rank-one AR(1) signal, ``H_k = sqrt(C/M) * beta**k * ones(M)`` for k >= 0."""

    C: float
    beta: float

    def __post_init__(self):
        if self.C < 0:
            raise ValueError(f"signal power C must be non-negative, got {self.C}")
        if not abs(self.beta) < 1.0:
            raise ValueError(f"AR coefficient beta must satisfy |beta| < 1, got {self.beta}")

    rank = 1
    variant = "ar_rank_one"

    def transfer(self, nu, channel_count: int) -> np.ndarray:
        """``H(nu)`` with shape ``(len(nu), M, 1)``."""
        z = _steering(np.atleast_1d(nu))
        h = np.sqrt(self.C / channel_count) / (1.0 - self.beta * z)
        return np.broadcast_to(h[:, None, None], (h.size, channel_count, 1)).copy()

    def total_power(self, channel_count: int | None = None) -> float:
        """``E ||u_n||^2``; independent of M by construction."""
        return self.C / (1.0 - self.beta**2)

    def scaled(self, factor: float) -> "ArRankOne":
        return ArRankOne(C=self.C * factor, beta=self.beta)

    @property
    def is_zero(self) -> bool:
        return self.C == 0


@dataclass(frozen=True)
class FirRandomSphere:
    """Rank-K FIR filter of order L with random unit-sphere taps.

    Column k of ``H_l`` is ``sqrt(amplitudes[k]) * w[l, k]`` where each
    ``w[l, k]`` is uniform on the unit sphere of C^M, drawn from ``sphere_seed``.
    ``amplitudes`` are per-source powers, so ``H(nu)^* H(nu)`` tends to
    ``(L + 1) * diag(amplitudes)`` for large M.
    """

    L: int
    amplitudes: tuple
    sphere_seed: object = 0

    def __post_init__(self):
        amps = tuple(float(a) for a in np.atleast_1d(self.amplitudes))
        object.__setattr__(self, "amplitudes", amps)
        seed = self.sphere_seed
        if not isinstance(seed, (int, np.integer)):
            object.__setattr__(self, "sphere_seed", tuple(int(s) for s in seed))
        if self.L < 0:
            raise ValueError(f"filter order L must be >= 0, got {self.L}")
        if len(amps) == 0:
            raise ValueError("FirRandomSphere needs at least one source")
        if any(a < 0 for a in amps):
            raise ValueError(f"amplitudes must be non-negative, got {amps}")
        if any(a < b for a, b in zip(amps, amps[1:])):
            raise ValueError(f"amplitudes must be sorted non-increasing, got {amps}")

    variant = "fir_random_sphere"

    @property
    def rank(self) -> int:
        return len(self.amplitudes)

    def directions(self, channel_count: int) -> np.ndarray:
        """Unit vectors ``w[l, :, k]`` with shape ``(L + 1, M, K)``."""
        return _sphere_directions(self.sphere_seed, self.L, self.rank, channel_count).copy()

    def taps(self, channel_count: int) -> np.ndarray:
        """Filter coefficients ``H_l`` with shape ``(L + 1, M, K)``."""
        w = _sphere_directions(self.sphere_seed, self.L, self.rank, channel_count)
        return w * np.sqrt(np.asarray(self.amplitudes))[None, None, :]

    def transfer(self, nu, channel_count: int) -> np.ndarray:
        """``H(nu) = sum_l H_l exp(-2 i pi nu l)`` with shape ``(len(nu), M, K)``."""
        nu = np.atleast_1d(np.asarray(nu, dtype=float))
        taps = self.taps(channel_count)
        phase = np.exp(-2j * np.pi * np.outer(nu, np.arange(self.L + 1)))
        return np.tensordot(phase, taps, axes=(1, 0))

    def total_power(self, channel_count: int | None = None) -> float:
        return (self.L + 1) * float(sum(self.amplitudes))

    def scaled(self, factor: float) -> "FirRandomSphere":
        return FirRandomSphere(
            L=self.L,
            amplitudes=tuple(a * factor for a in self.amplitudes),
            sphere_seed=self.sphere_seed,
        )

    def reseeded(self, sphere_seed) -> "FirRandomSphere":
        return FirRandomSphere(L=self.L, amplitudes=self.amplitudes, sphere_seed=sphere_seed)

    @property
    def is_zero(self) -> bool:
        return not any(self.amplitudes)


SignalModel = Union[ArRankOne, FirRandomSphere]


@lru_cache(maxsize=64)
def _sphere_directions(seed, L: int, K: int, M: int) -> np.ndarray:
    rng = substream(seed, SPHERE_STREAM)
    w = complex_normal(rng, (L + 1, K, M))
    w /= np.linalg.norm(w, axis=2, keepdims=True)
    w = np.ascontiguousarray(w.transpose(0, 2, 1))
    w.setflags(write=False)
    return w


def signal_to_dict(signal: SignalModel | None) -> dict | None:
    if signal is None:
        return None
    if isinstance(signal, ArRankOne):
        return {"variant": signal.variant, "C": signal.C, "beta": signal.beta}
    seed = signal.sphere_seed
    return {
        "variant": signal.variant,
        "L": signal.L,
        "amplitudes": list(signal.amplitudes),
        "sphere_seed": seed if isinstance(seed, int) else list(seed),
    }


def signal_from_dict(data: dict | None) -> SignalModel | None:
    if data is None:
        return None
    variant = data.get("variant")
    if variant == ArRankOne.variant:
        return ArRankOne(C=float(data.get("C", 0.0)), beta=float(data["beta"]))
    if variant == FirRandomSphere.variant:
        return FirRandomSphere(
            L=int(data["L"]),
            amplitudes=tuple(data["amplitudes"]),
            sphere_seed=data.get("sphere_seed", 0),
        )
    raise ValueError(f"unknown signal variant {variant!r}")


# ---------------------------------------------------------------- blocks


@dataclass
class TimeSeriesBlock:
    """``M x N`` complex samples, one row per channel."""

    samples: np.ndarray
    seed: object = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.complex128)
        if samples.ndim != 2:
            raise ValueError(f"samples must be 2-D (M, N), got shape {samples.shape}")
        if samples.shape[0] < 1 or samples.shape[1] < 1:
            raise ValueError(f"empty block of shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("block contains non-finite samples")
        self.samples = samples

    @property
    def channel_count(self) -> int:
        return self.samples.shape[0]

    @property
    def sample_count(self) -> int:
        return self.samples.shape[1]

    M = channel_count
    N = sample_count

    def __add__(self, other: "TimeSeriesBlock") -> "TimeSeriesBlock":
        if self.samples.shape != other.samples.shape:
            raise ValueError(f"shape mismatch {self.samples.shape} vs {other.samples.shape}")
        return TimeSeriesBlock(self.samples + other.samples, seed=self.seed)


def write_block(path, block: TimeSeriesBlock) -> None:
    """Write ``SCDB1`` little-endian binary: header then interleaved (re, im) f64."""
    M, N = block.samples.shape
    with open(path, "wb") as fh:
        fh.write(_BLOCK_HEADER.pack(BLOCK_MAGIC, M, N))
        fh.write(np.ascontiguousarray(block.samples, dtype="<c16").tobytes())


def read_block(path) -> TimeSeriesBlock:
    raw = Path(path).read_bytes()
    if len(raw) < _BLOCK_HEADER.size:
        raise BlockFormatError(f"{path}: file too short for SCDB1 header ({len(raw)} bytes)")
    magic, M, N = _BLOCK_HEADER.unpack_from(raw)
    if magic != BLOCK_MAGIC:
        raise BlockFormatError(f"{path}: bad magic {magic!r}")
    expected = _BLOCK_HEADER.size + 16 * M * N
    if len(raw) != expected:
        raise BlockFormatError(
            f"{path}: expected {expected} bytes for M={M}, N={N}, found {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<c16", offset=_BLOCK_HEADER.size).reshape(M, N)
    try:
        return TimeSeriesBlock(data.astype(np.complex128))
    except ValueError as exc:
        raise BlockFormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- generators


def _ar1(rng: np.random.Generator, theta: float, n: int, variance: float) -> np.ndarray:
    """Stationary complex AR(1) path of length n."""
    e = complex_normal(rng, n, variance)
    e[0] /= np.sqrt(1.0 - theta**2)
    return lfilter([1.0], [1.0, -theta], e)


def generate_noise(model: NoiseModel, n_samples: int, seed: Seed) -> TimeSeriesBlock:
    """H0 data: independent stationary AR(1) channels.

    Channel ``m`` draws from substream ``(seed, NOISE_STREAM, m)``.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    M = model.channel_count
    out = np.empty((M, n_samples), dtype=np.complex128)
    for m, theta in enumerate(model.theta):
        out[m] = _ar1(substream(seed, NOISE_STREAM, m), theta, n_samples, model.variance)
    return TimeSeriesBlock(out, seed=seed)


def generate_signal(
    model: SignalModel, n_samples: int, channel_count: int, seed: Seed
) -> TimeSeriesBlock:
    """Filtered complex white noise ``u_n = sum_k H_k eps_{n-k}``."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    if channel_count < 1:
        raise ValueError(f"channel_count must be >= 1, got {channel_count}")
    rng = substream(seed, SIGNAL_STREAM)
    M = channel_count
    if isinstance(model, ArRankOne):
        latent = _ar1(rng, model.beta, n_samples, 1.0)
        u = np.sqrt(model.C / M) * np.broadcast_to(latent, (M, n_samples))
        return TimeSeriesBlock(np.array(u), seed=seed)
    if isinstance(model, FirRandomSphere):
        K, L = model.rank, model.L
        if K > M:
            raise ValueError(f"rank K={K} exceeds channel count M={M}")
        taps = model.taps(M)
        eps = complex_normal(rng, (K, n_samples + L))
        u = np.zeros((M, n_samples), dtype=np.complex128)
        for lag in range(L + 1):
            u += taps[lag] @ eps[:, L - lag : L - lag + n_samples]
        return TimeSeriesBlock(u, seed=seed)
    raise TypeError(f"unsupported signal model {type(model).__name__}")


def generate_mixture(
    noise: NoiseModel, signal: SignalModel | None, n_samples: int, seed: Seed
) -> TimeSeriesBlock:
    """``y = u + v``; ``signal=None`` gives H0 data equal to :func:`generate_noise`."""
    v = generate_noise(noise, n_samples, seed)
    if signal is None:
        return v
    if isinstance(signal, FirRandomSphere) and signal.rank > noise.channel_count:
        raise ValueError(
            f"rank K={signal.rank} exceeds channel count M={noise.channel_count}"
        )
    u = generate_signal(signal, n_samples, noise.channel_count, seed)
    return v + u


# ---------------------------------------------------------------- amplitude solving


def _grid_frequencies(grid) -> np.ndarray:
    nu = getattr(grid, "frequencies", grid)
    return np.atleast_1d(np.asarray(nu, dtype=float))


def solve_amplitude_for_target_gamma(
    noise: NoiseModel,
    signal: SignalModel,
    target: float,
    grid,
    k_sum: int = 1,
) -> float:
    """Amplitude that puts the peak frequency-domain SNR at ``target``.

    For :class:`ArRankOne` the return value is the signal power ``C`` (the
    model's own ``C`` is ignored). For :class:`FirRandomSphere` it is the common
    factor applied to ``amplitudes``, ratios preserved. The SNR maximised over
    ``grid`` is the sum of the ``k_sum`` largest perturbation eigenvalues.
    """
    if target < 0:
        raise ValueError(f"target must be non-negative, got {target}")
    nu = _grid_frequencies(grid)
    if isinstance(signal, ArRankOne):
        # gamma(nu) = C/(M |1 - beta z|^2) * sum_m 1/s_m(nu), linear in C
        z = _steering(nu)
        inv_s = 1.0 / noise.spectral_density(nu)
        per_unit = inv_s.sum(axis=1) / noise.channel_count / np.abs(1.0 - signal.beta * z) ** 2
        return float(target / per_unit.max())
    from .rmt import gamma_spectrum

    spectrum = gamma_spectrum(noise, signal, nu, k_max=min(k_sum, signal.rank))
    peak = spectrum.peak_sum()
    if target == 0:
        return 0.0
    if peak <= 0:
        raise ValueError("target > 0 requested for an identically zero filter")
    return float(target / peak)


def with_target_gamma(
    noise: NoiseModel, signal: SignalModel, target: float, grid, k_sum: int = 1
) -> SignalModel:
    """Copy of ``signal`` rescaled so its peak SNR over ``grid`` equals ``target``."""
    value = solve_amplitude_for_target_gamma(noise, signal, target, grid, k_sum=k_sum)
    if isinstance(signal, ArRankOne):
        return ArRankOne(C=value, beta=signal.beta)
    return signal.scaled(value)


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class SimulationConfig:
    """One dataset: models plus dimensions and seed (JSON round-trippable)."""

    noise: NoiseModel
    signal: SignalModel | None
    N: int
    seed: int = 0
    spec_version: int = field(default=1, compare=False)

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if isinstance(self.signal, FirRandomSphere) and self.signal.rank > self.M:
            raise ValueError(f"rank K={self.signal.rank} exceeds channel count M={self.M}")

    @property
    def M(self) -> int:
        return self.noise.channel_count

    def to_dict(self) -> dict:
        return {
            "spec_version": self.spec_version,
            "M": self.M,
            "N": self.N,
            "seed": self.seed,
            "noise": self.noise.to_dict(),
            "signal": signal_to_dict(self.signal),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        version = data.get("spec_version", 1)
        if version != 1:
            raise ValueError(f"unsupported spec_version {version}")
        M = int(data["M"])
        noise_d = data.get("noise", {})
        theta = noise_d.get("theta", 0.0)
        variance = float(noise_d.get("variance", 1.0))
        if np.ndim(theta) == 0:
            noise = NoiseModel.ar1(float(theta), M, variance)
        else:
            noise = NoiseModel(theta=tuple(theta), variance=variance)
            if noise.channel_count != M:
                raise ValueError(
                    f"noise.theta has {noise.channel_count} entries but M={M}"
                )
        return cls(
            noise=noise,
            signal=signal_from_dict(data.get("signal")),
            N=int(data["N"]),
            seed=int(data.get("seed", 0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "SimulationConfig":
        return cls.from_dict(json.loads(text))

    def generate(self) -> TimeSeriesBlock:
        return generate_mixture(self.noise, self.signal, self.N, self.seed)
