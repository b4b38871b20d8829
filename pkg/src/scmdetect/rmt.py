"""Random-matrix reference quantities for coherence-matrix tests.

Marcenko-Pastur law with shape ``c = M / (B + 1)``, the spike map ``phi``,
the frequency-domain SNR spectrum ``gamma_k(nu)``, a Wishart surrogate of the
coherence matrix and the ESD deviation curves ``F_min`` / ``F_max``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .spectral import SmoothingSpec, SpectralFrame
from .tsgen import NoiseModel, SignalModel, complex_normal, substream

__all__ = [
    "MarcenkoPastur",
    "PerturbationSpectrum",
    "DeviationCurves",
    "adaptive_simpson",
    "mp_edges",
    "mp_density",
    "mp_cdf",
    "mp_moment",
    "mp_log_moment",
    "phi",
    "gamma_spectrum",
    "perturbation_root",
    "wishart_surrogate",
    "esd_deviation",
]

SURROGATE_STREAM = 3


def _check_shape(c: float, allow_zero: bool = False) -> float:
    c = float(c)
    if c >= 1.0:
        raise ValueError(f"shape ratio c must be < 1, got {c}")
    if c < 0 or (c == 0 and not allow_zero):
        raise ValueError(f"shape ratio c must be in (0, 1), got {c}")
    return c


def adaptive_simpson(
    f: Callable[[float], float], a: float, b: float, tol: float = 1e-10, max_depth: int = 48
) -> float:
    """Adaptive Simpson quadrature of ``f`` over ``[a, b]`` to absolute ``tol``."""
    if a == b:
        return 0.0
    m = 0.5 * (a + b)
    fa, fm, fb = f(a), f(m), f(b)
    stack = [(a, b, fa, fm, fb, (b - a) / 6.0 * (fa + 4.0 * fm + fb), tol, max_depth)]
    total = 0.0
    while stack:
        a, b, fa, fm, fb, whole, eps, depth = stack.pop()
        m = 0.5 * (a + b)
        flm, frm = f(0.5 * (a + m)), f(0.5 * (m + b))
        left = (m - a) / 6.0 * (fa + 4.0 * flm + fm)
        right = (b - m) / 6.0 * (fm + 4.0 * frm + fb)
        delta = left + right - whole
        if depth <= 0 or abs(delta) <= 15.0 * eps:
            total += left + right + delta / 15.0
        else:
            stack.append((m, b, fm, frm, fb, right, 0.5 * eps, depth - 1))
            stack.append((a, m, fa, flm, fm, left, 0.5 * eps, depth - 1))
    return total


def mp_edges(c: float) -> tuple[float, float]:
    """Support ``((1 - sqrt c)^2, (1 + sqrt c)^2)``; ``c = 0`` gives ``(1, 1)``."""
    c = _check_shape(c, allow_zero=True)
    r = math.sqrt(c)
    return (1.0 - r) ** 2, (1.0 + r) ** 2


def mp_density(lam, c: float):
    """Marcenko-Pastur density, zero off the support."""
    c = _check_shape(c)
    lo, hi = mp_edges(c)
    lam = np.asarray(lam, dtype=float)
    inside = (lam > lo) & (lam < hi)
    safe = np.where(inside, lam, 1.0)
    out = np.where(
        inside, np.sqrt(np.clip((safe - lo) * (hi - safe), 0.0, None)) / (2 * np.pi * c * safe), 0.0
    )
    return float(out) if out.ndim == 0 else out


# With lam = 1 + c - 2 sqrt(c) cos(t), t in [0, pi], the measure f(lam) d lam
# becomes 2 sin(t)^2 / (pi lam(t)) dt, which has no edge singularities.


def _lam_of(t: float, c: float) -> float:
    return 1.0 + c - 2.0 * math.sqrt(c) * math.cos(t)


def _angle_of(lam: float, c: float) -> float:
    x = (1.0 + c - lam) / (2.0 * math.sqrt(c))
    return math.acos(min(1.0, max(-1.0, x)))


def mp_moment(g: Callable[[float], float], c: float, tol: float = 1e-10) -> float:
    """``int g(lam) f(lam) d lam`` over the support."""
    c = _check_shape(c)

    def integrand(t):
        lam = _lam_of(t, c)
        return g(lam) * 2.0 * math.sin(t) ** 2 / (math.pi * lam)

    return adaptive_simpson(integrand, 0.0, math.pi, tol)


def mp_log_moment(c: float, tol: float = 1e-10) -> float:
    """``int log(lam) f(lam) d lam`` by quadrature."""
    return mp_moment(math.log, c, tol)


def mp_cdf(lam, c: float, tol: float = 1e-10):
    """Marcenko-Pastur distribution function by adaptive Simpson quadrature."""
    c = _check_shape(c)
    lo, hi = mp_edges(c)

    def one(x: float) -> float:
        if x <= lo:
            return 0.0
        if x >= hi:
            return 1.0
        t = _angle_of(x, c)
        val = adaptive_simpson(
            lambda s: 2.0 * math.sin(s) ** 2 / (math.pi * _lam_of(s, c)), 0.0, t, tol
        )
        return min(1.0, max(0.0, val))

    arr = np.asarray(lam, dtype=float)
    if arr.ndim == 0:
        return one(float(arr))
    return np.array([one(float(x)) for x in arr.ravel()]).reshape(arr.shape)


@dataclass(frozen=True)
class MarcenkoPastur:
    """Marcenko-Pastur law with shape ratio ``c`` in (0, 1)."""

    c: float

    def __post_init__(self):
        _check_shape(self.c)

    @property
    def edges(self) -> tuple[float, float]:
        return mp_edges(self.c)

    @property
    def lower(self) -> float:
        return self.edges[0]

    @property
    def upper(self) -> float:
        return self.edges[1]

    def pdf(self, lam):
        return mp_density(lam, self.c)

    def cdf(self, lam):
        return mp_cdf(lam, self.c)

    def moment(self, g: Callable[[float], float]) -> float:
        return mp_moment(g, self.c)

    def quantiles(self, n: int) -> np.ndarray:
        """Midpoint quantiles ``F^{-1}((i - 1/2) / n)`` for ``i = 1..n`` (by bisection)."""
        lo, hi = self.edges
        out = np.empty(n)
        for i in range(n):
            p = (i + 0.5) / n
            a, b = lo, hi
            for _ in range(60):
                m = 0.5 * (a + b)
                if mp_cdf(m, self.c, tol=1e-12) < p:
                    a = m
                else:
                    b = m
            out[i] = 0.5 * (a + b)
        return out[::-1]


def phi(x, c: float):
    """Spike map: ``(x + 1)(x + c) / x`` above ``sqrt(c)``, ``lambda_+`` below."""
    c = _check_shape(c, allow_zero=True)
    hi = mp_edges(c)[1]
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("phi is defined for x >= 0")
    above = x > math.sqrt(c)
    safe = np.where(above, x, 1.0)
    out = np.where(above, (safe + 1.0) * (safe + c) / safe, hi)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- perturbation


@dataclass
class PerturbationSpectrum:
    """``gamma_k(nu)`` for ``k = 1..k_max`` with shape ``(n, k_max)``.

    ``argmax`` / ``argmax_sum`` are grid positions maximizing ``gamma_1`` and
    ``sum_k gamma_k``; ties go to the smallest position.
    """

    frequencies: np.ndarray
    gammas: np.ndarray
    argmax: int
    argmax_sum: int

    @property
    def nu_star(self) -> float:
        return float(self.frequencies[self.argmax])

    @property
    def nu_star_sum(self) -> float:
        return float(self.frequencies[self.argmax_sum])

    def peak(self) -> float:
        return float(self.gammas[self.argmax, 0])

    def peak_sum(self) -> float:
        return float(self.gammas[self.argmax_sum].sum())


def gamma_spectrum(
    noise: NoiseModel, signal: SignalModel | None, grid, k_max: int = 1
) -> PerturbationSpectrum:
    """Eigenvalues of ``H^* S_v^{-1} H`` (equal to the nonzero eigenvalues of
    ``S_v^{-1/2} H H^* S_v^{-1/2}``) at every grid frequency.

    ``grid`` is a :class:`~scmdetect.spectral.FrequencyGrid` or an array of
    frequencies.
    """
    nu = np.atleast_1d(np.asarray(getattr(grid, "frequencies", grid), dtype=float))
    if nu.size == 0:
        raise ValueError("empty frequency grid")
    rank = 0 if signal is None else signal.rank
    if k_max < 1 or (signal is not None and k_max > rank):
        raise ValueError(f"k_max must lie in [1, {max(rank, 1)}], got {k_max}")
    gam = np.zeros((nu.size, k_max))
    if signal is not None and not signal.is_zero:
        M = noise.channel_count
        H = signal.transfer(nu, M)
        Hw = H / np.sqrt(noise.spectral_density(nu))[:, :, None]
        G = Hw.conj().transpose(0, 2, 1) @ Hw
        w = np.linalg.eigvalsh(G)[:, ::-1][:, :k_max]
        gam = np.clip(w, 0.0, None)
    return PerturbationSpectrum(
        frequencies=nu,
        gammas=gam,
        argmax=int(np.argmax(gam[:, 0])),
        argmax_sum=int(np.argmax(gam.sum(axis=1))),
    )


def perturbation_root(noise: NoiseModel, signal: SignalModel | None, nu: float):
    """``Xi(nu)^{1/2}`` and the nonzero ``gamma_k(nu)``.

    ``Xi = I + S_v^{-1/2} H H^* S_v^{-1/2}``; with ``S_v^{-1/2} H = Q diag(s) V^*``
    its square root is ``I + Q diag(sqrt(1 + s^2) - 1) Q^*``.
    """
    M = noise.channel_count
    root = np.eye(M, dtype=np.complex128)
    if signal is None or signal.is_zero:
        return root, np.zeros(0)
    H = signal.transfer([nu], M)[0]
    A = H / np.sqrt(noise.spectral_density([nu])[0])[:, None]
    Q, s, _ = np.linalg.svd(A, full_matrices=False)
    root += (Q * (np.sqrt(1.0 + s**2) - 1.0)) @ Q.conj().T
    return root, s**2


def wishart_surrogate(
    noise: NoiseModel,
    signal: SignalModel | None,
    nu: float,
    smoothing: SmoothingSpec,
    seed,
    freq_index: int = 0,
) -> SpectralFrame:
    """Draw ``Xi^{1/2} X X^* Xi^{1/2} / (B + 1)`` with ``X`` an ``M x (B+1)``
    i.i.d. ``N_C(0, 1)`` matrix; with no signal this is a white complex Wishart."""
    M = noise.channel_count
    root, _ = perturbation_root(noise, signal, nu)
    X = complex_normal(substream(seed, SURROGATE_STREAM), (M, smoothing.window))
    Y = root @ X
    W = (Y @ Y.conj().T) / smoothing.window
    W = 0.5 * (W + W.conj().T)
    return SpectralFrame(freq_index, W, "surrogate")


# ---------------------------------------------------------------- ESD deviation


@dataclass
class DeviationCurves:
    """Extremes over frequency of the empirical spectral CDF against the MP CDF."""

    lam: np.ndarray
    f_min: np.ndarray
    f_max: np.ndarray
    mp: np.ndarray
    sup_distance: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["lambda", "F_min", "F_max", "mp_cdf"])
            for row in zip(self.lam, self.f_min, self.f_max, self.mp):
                w.writerow([f"{v:.10f}" for v in row])


def esd_deviation(
    spectra: np.ndarray, c: float, n_points: int = 512, chunk: int = 2048
) -> DeviationCurves:
    """``F_min`` / ``F_max`` over frequency on a grid spanning ``[0, lambda_+ + 1]``.

    Parameters
    ----------
    spectra : ndarray, shape (n_freq, M)
        Eigenvalues at each frequency (any order).
    c : float
        Shape ratio of the reference law.

    Notes
    -----
    The empirical CDF at ``t`` counts eigenvalues strictly below ``t``.
    """
    spectra = np.atleast_2d(np.asarray(spectra, dtype=float))
    if spectra.size == 0:
        raise ValueError("empty spectrum set")
    n, M = spectra.shape
    lam = np.linspace(0.0, mp_edges(c)[1] + 1.0, n_points)
    f_min = np.full(n_points, np.inf)
    f_max = np.full(n_points, -np.inf)
    for start in range(0, n, chunk):
        block = np.sort(spectra[start : start + chunk], axis=1)
        counts = np.empty((block.shape[0], n_points))
        for r, row in enumerate(block):
            counts[r] = np.searchsorted(row, lam, side="left")
        counts /= M
        np.minimum(f_min, counts.min(axis=0), out=f_min)
        np.maximum(f_max, counts.max(axis=0), out=f_max)
    mp = mp_cdf(lam, c)
    sup = float(max(np.abs(f_min - mp).max(), np.abs(f_max - mp).max()))
    return DeviationCurves(lam, f_min, f_max, mp, sup)
