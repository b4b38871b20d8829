"""Detection statistics on coherence matrices and their empirical calibration.

Four statistics, each the maximum over the frequency grid of a per-frequency
quantity:

* ``LE(k)``: sum of the ``k`` largest coherence eigenvalues (``k = 1`` is the
  largest eigenvalue test),
* ``LSS-Frob``: ``|M^{-1} sum (lambda_m - 1)^2 - c|``,
* ``LSS-logdet``: ``|M^{-1} sum log lambda_m - int log(lambda) dMP|``,
* ``MCC``: largest off-diagonal coherence modulus.

Thresholds come from Monte-Carlo simulation of the null model.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from ._parallel import map_ordered
from .rmt import mp_edges, mp_log_moment
from .spectral import (
    REFRESH_INTERVAL,
    FrequencyGrid,
    SmoothingSpec,
    SpectralFrame,
    check_status,
    coherence_eigenvalues,
    transposed_dft,
)
from .tsgen import NoiseModel, TimeSeriesBlock, generate_noise

__all__ = [
    "Detector",
    "LE",
    "LSS_FROBENIUS",
    "LSS_LOGDET",
    "MCC",
    "DEFAULT_DETECTORS",
    "NonPositiveEigenvalue",
    "InsufficientTrials",
    "Calibration",
    "CalibrationRegistry",
    "DetectorReport",
    "statistic_le",
    "statistic_lss",
    "statistic_mcc",
    "statistic_curve",
    "aggregate_statistics",
    "empirical_threshold",
    "asymptotic_threshold",
    "calibrate",
    "decide",
]

EIG_FLOOR = 1e-12
PRUNE_BLOCK = 8
POWER_ITERS = 2


class NonPositiveEigenvalue(ValueError):
    """A coherence eigenvalue fell below the log-determinant floor."""


class InsufficientTrials(ValueError):
    """Too few null trials for the requested significance level."""


@dataclass(frozen=True, order=True)
class Detector:
    """Test statistic selector.

    ``name`` is one of ``"le"``, ``"lss_frobenius"``, ``"lss_logdet"``,
    ``"mcc"``; ``k`` is only meaningful for ``"le"``.
    """

    name: str
    k: int = 1

    _NAMES = ("le", "lss_frobenius", "lss_logdet", "mcc")

    def __post_init__(self):
        if self.name not in self._NAMES:
            raise ValueError(f"unknown detector {self.name!r}; expected one of {self._NAMES}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.name != "le" and self.k != 1:
            raise ValueError(f"k only applies to the largest-eigenvalue detector, not {self.name}")

    @property
    def label(self) -> str:
        if self.name == "le":
            return "LE" if self.k == 1 else f"LE({self.k})"
        return {"lss_frobenius": "LSS-Frob", "lss_logdet": "LSS-logdet", "mcc": "MCC"}[self.name]

    @property
    def key(self) -> str:
        return self.name if self.name != "le" else f"le{self.k}"

    @classmethod
    def parse(cls, text: str) -> "Detector":
        """Accepts labels (``LE``, ``LE(2)``, ``LSS-Frob``...) or keys (``le1``, ``mcc``...)."""
        t = text.strip().lower().replace("-", "_")
        aliases = {
            "lss_frob": "lss_frobenius",
            "frob": "lss_frobenius",
            "frobenius": "lss_frobenius",
            "logdet": "lss_logdet",
        }
        t = aliases.get(t, t)
        if t in ("lss_frobenius", "lss_logdet", "mcc"):
            return cls(t)
        if t.startswith("le"):
            rest = t[2:].strip("():_")
            return cls("le", int(rest) if rest else 1)
        raise ValueError(f"cannot parse detector {text!r}")

    def null_level(self, c: float) -> float:
        """Asymptotic null level of the per-frequency statistic (``k * lambda_+`` for LE)."""
        if self.name == "le":
            return self.k * mp_edges(c)[1]
        return 0.0


LE = Detector("le")
LSS_FROBENIUS = Detector("lss_frobenius")
LSS_LOGDET = Detector("lss_logdet")
MCC = Detector("mcc")
DEFAULT_DETECTORS = (LE, LSS_FROBENIUS, LSS_LOGDET, MCC)


@lru_cache(maxsize=256)
def _log_centering(c: float) -> float:
    return mp_log_moment(c)


# ---------------------------------------------------------------- literal statistics


def _descending(spectra) -> np.ndarray:
    s = np.atleast_2d(np.asarray(spectra, dtype=float))
    return -np.sort(-s, axis=1)


def statistic_le(spectra, k: int = 1) -> float:
    """``max_nu sum_{j <= k} lambda_j(C(nu))`` from per-frequency eigenvalues."""
    s = _descending(spectra)
    if k < 1 or k > s.shape[1]:
        raise ValueError(f"k must lie in [1, {s.shape[1]}], got {k}")
    return float(s[:, :k].sum(axis=1).max())


def _lss_curve(spectra, variant: str, c: float) -> np.ndarray:
    s = np.atleast_2d(np.asarray(spectra, dtype=float))
    if variant == "frobenius":
        return np.abs(np.mean((s - 1.0) ** 2, axis=1) - c)
    if variant == "logdet":
        low = s.min()
        if not low > EIG_FLOOR:
            raise NonPositiveEigenvalue(f"eigenvalue {low:.3g} at or below {EIG_FLOOR}")
        return np.abs(np.mean(np.log(s), axis=1) - _log_centering(float(c)))
    raise ValueError(f"unknown LSS variant {variant!r}")


def statistic_lss(spectra, variant: str, c: float) -> float:
    """Linear-spectral-statistic deviation from its Marcenko-Pastur limit, maximized over frequency.

    Parameters
    ----------
    spectra : array_like, shape (n_freq, M)
        Full coherence spectra.
    variant : {"frobenius", "logdet"}
    c : float
        Shape ratio ``M / (B + 1)``.
    """
    return float(_lss_curve(spectra, variant, c).max())


def _offdiag_max(mat: np.ndarray) -> float:
    iu = np.triu_indices(mat.shape[0], 1)
    return float(np.abs(mat[iu]).max())


def statistic_mcc(frames) -> float:
    """Largest off-diagonal modulus over all coherence frames."""
    mats = [f.matrix if isinstance(f, SpectralFrame) else np.asarray(f) for f in frames]
    if not mats:
        raise ValueError("no frames")
    if mats[0].shape[0] < 2:
        raise ValueError("MCC needs at least two channels")
    return max(_offdiag_max(m) for m in mats)


def statistic_curve(
    detector: Detector,
    block: TimeSeriesBlock,
    smoothing: SmoothingSpec,
    grid: FrequencyGrid | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-frequency statistic values; returns ``(freq_indices, values)``.

    LE and LSS values come from full eigendecompositions of every coherence
    frame; MCC from the frame entries.
    """
    XT = transposed_dft(block)
    N, M = XT.shape
    grid = grid or FrequencyGrid(N)
    smoothing.check(N)
    idx = grid.index_array
    c = smoothing.shape_ratio(M)
    if detector.name == "mcc":
        if M < 2:
            raise ValueError("MCC needs at least two channels")
        _, _, _, mcc, status = _kernels.frame_statistics(
            XT, smoothing.B, idx, REFRESH_INTERVAL, False, 0
        )
        check_status(status, idx)
        return idx, mcc
    dft = XT.T
    if detector.name == "le":
        if detector.k > M:
            raise ValueError(f"k={detector.k} exceeds M={M}")
        eig = coherence_eigenvalues(dft, smoothing, grid, k=detector.k)
        return idx, eig.sum(axis=1)
    eig = coherence_eigenvalues(dft, smoothing, grid)
    variant = "frobenius" if detector.name == "lss_frobenius" else "logdet"
    return idx, _lss_curve(eig, variant, c)


# ---------------------------------------------------------------- fast aggregates


def aggregate_statistics(
    block: TimeSeriesBlock | np.ndarray,
    smoothing: SmoothingSpec,
    detectors: Sequence[Detector] = DEFAULT_DETECTORS,
    grid: FrequencyGrid | None = None,
    prune_block: int = PRUNE_BLOCK,
) -> dict:
    """Aggregate (max over the grid) value of each detector on one dataset.

    Gives the same numbers as the per-frequency route of
    :func:`statistic_curve` without a full eigendecomposition per frequency:
    the Frobenius and log-determinant statistics use ``||C - I||_F`` and a
    Cholesky factorization, and the largest eigenvalue is certified frame by
    frame against a running lower bound (see
    :func:`scmdetect._kernels.certify_max_eigenvalue`).

    ``block`` may be a :class:`TimeSeriesBlock` or an already transposed DFT
    array of shape ``(N, M)``.
    """
    if isinstance(block, TimeSeriesBlock):
        XT = transposed_dft(block)
    else:
        XT = np.ascontiguousarray(block, dtype=np.complex128)
    N, M = XT.shape
    smoothing.check(N)
    grid = grid or FrequencyGrid(N)
    if grid.n_samples != N:
        raise ValueError(f"grid is for N={grid.n_samples} but the data has N={N}")
    idx = grid.index_array
    B = smoothing.B
    c = smoothing.shape_ratio(M)
    names = {d.name for d in detectors}
    ks = sorted({d.k for d in detectors if d.name == "le" and d.k > 1})
    if ks and ks[-1] > M:
        raise ValueError(f"k={ks[-1]} exceeds M={M}")
    if "mcc" in names and M < 2:
        raise ValueError("MCC needs at least two channels")
    need_pass1 = bool(names & {"lss_frobenius", "lss_logdet", "mcc"}) or any(
        d.name == "le" and d.k == 1 for d in detectors
    )
    out = {}
    if need_pass1:
        want_logdet = "lss_logdet" in names
        proxy, frob, logdet, mcc, status = _kernels.frame_statistics(
            XT, B, idx, REFRESH_INTERVAL, want_logdet, POWER_ITERS
        )
        check_status(status, idx)
        if want_logdet and np.any(status == _kernels.NOT_PD):
            raise NonPositiveEigenvalue("coherence matrix is not positive definite")
    topk = None
    if ks:
        topk, status = _kernels.frame_eigenvalues(XT, B, idx, REFRESH_INTERVAL, ks[-1])
        check_status(status, idx)
    for d in detectors:
        if d.name == "le" and d.k == 1:
            if topk is not None:
                out[d] = float(topk[:, 0].max())
                continue
            start = int(np.argmax(proxy))
            exact, _ = _kernels.frame_eigenvalues(
                XT, B, idx[start : start + 1], REFRESH_INTERVAL, 1
            )
            L, _, _ = _kernels.certify_max_eigenvalue(
                XT, B, idx, REFRESH_INTERVAL, float(exact[0, 0]), prune_block
            )
            out[d] = float(L)
        elif d.name == "le":
            out[d] = float(topk[:, : d.k].sum(axis=1).max())
        elif d.name == "lss_frobenius":
            out[d] = float(np.abs(frob - c).max())
        elif d.name == "lss_logdet":
            out[d] = float(np.abs(logdet - _log_centering(float(c))).max())
        else:
            out[d] = float(mcc.max())
    return out


# ---------------------------------------------------------------- calibration


def empirical_threshold(null_statistics, alpha: float) -> float:
    """The ``ceil((1 - alpha) n)``-th smallest null statistic."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    s = np.sort(np.asarray(null_statistics, dtype=float))
    if s.size == 0:
        raise InsufficientTrials("no null statistics")
    rank = math.ceil(round((1.0 - alpha) * s.size, 9))
    return float(s[max(rank, 1) - 1])


def asymptotic_threshold(detector: Detector, c: float, epsilon: float) -> float:
    """``k * lambda_+ + epsilon`` (largest-eigenvalue detectors only)."""
    if detector.name != "le":
        raise ValueError("an asymptotic threshold is only defined for the LE detector")
    return detector.null_level(c) + epsilon


def min_trials(alpha: float) -> int:
    return math.ceil(round(10.0 / alpha, 9))


@dataclass
class Calibration:
    """A calibrated threshold with the null sample it came from."""

    detector: Detector
    threshold: float
    alpha: float
    n_trials: int
    seed: object
    N: int
    M: int
    B: int
    stride: int = 1
    noise_fingerprint: str = ""
    null_statistics: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)

    @property
    def key(self) -> str:
        return registry_key(
            self.detector, self.N, self.M, self.B, self.noise_fingerprint,
            self.alpha, self.n_trials, self.seed,
        )

    @property
    def epsilon(self) -> float:
        """Threshold minus the asymptotic null level."""
        return self.threshold - self.detector.null_level(self.M / (self.B + 1))

    def to_dict(self, include_null: bool = True) -> dict:
        seed = list(self.seed) if isinstance(self.seed, (tuple, list)) else self.seed
        d = {
            "detector": self.detector.key,
            "threshold": self.threshold,
            "alpha": self.alpha,
            "n_trials": self.n_trials,
            "seed": seed,
            "N": self.N,
            "M": self.M,
            "B": self.B,
            "stride": self.stride,
            "noise_fingerprint": self.noise_fingerprint,
        }
        if include_null:
            d["null_statistics"] = [float(v) for v in self.null_statistics]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Calibration":
        seed = d.get("seed", 0)
        return cls(
            detector=Detector.parse(d["detector"]),
            threshold=float(d["threshold"]),
            alpha=float(d["alpha"]),
            n_trials=int(d["n_trials"]),
            seed=tuple(seed) if isinstance(seed, list) else seed,
            N=int(d["N"]),
            M=int(d["M"]),
            B=int(d["B"]),
            stride=int(d.get("stride", 1)),
            noise_fingerprint=d.get("noise_fingerprint", ""),
            null_statistics=np.asarray(d.get("null_statistics", []), dtype=float),
        )


def registry_key(detector, N, M, B, fingerprint, alpha, n_trials, seed) -> str:
    seed = "-".join(str(s) for s in seed) if isinstance(seed, (tuple, list)) else str(seed)
    return f"{detector.key}|N={N}|M={M}|B={B}|noise={fingerprint}|alpha={alpha:g}|n={n_trials}|seed={seed}"


def _seed_tuple(seed) -> tuple:
    return tuple(seed) if isinstance(seed, (tuple, list)) else (int(seed),)


def _null_trial(args):
    noise, N, B, stride, detectors, seed = args
    block = generate_noise(noise, N, seed)
    stats = aggregate_statistics(block, SmoothingSpec(B), detectors, FrequencyGrid(N, stride=stride))
    return [stats[d] for d in detectors]


def null_statistics(
    detectors: Sequence[Detector],
    noise: NoiseModel,
    N: int,
    B: int,
    seeds: Iterable,
    stride: int = 1,
    workers: int | None = 1,
) -> np.ndarray:
    """Aggregate statistics on H0 data, shape ``(n_seeds, n_detectors)``."""
    detectors = tuple(detectors)
    jobs = [(noise, N, B, stride, detectors, s) for s in seeds]
    rows = map_ordered(_null_trial, jobs, workers)
    return np.asarray(rows, dtype=float).reshape(len(jobs), len(detectors))


def calibrate(
    detectors: Detector | Sequence[Detector],
    noise: NoiseModel,
    N: int,
    B: int,
    alpha: float = 0.05,
    n_trials: int = 2000,
    seed=0,
    stride: int = 1,
    workers: int | None = 1,
) -> dict:
    """Empirical thresholds from ``n_trials`` simulated H0 datasets.

    Trial ``i`` uses seed ``(*seed, i)``. All detectors share the same null
    datasets. Returns ``{detector: Calibration}``.

    Raises
    ------
    InsufficientTrials
        If ``n_trials < ceil(10 / alpha)``.
    """
    if isinstance(detectors, Detector):
        detectors = (detectors,)
    detectors = tuple(detectors)
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if n_trials < min_trials(alpha):
        raise InsufficientTrials(
            f"n_trials={n_trials} is below ceil(10/alpha)={min_trials(alpha)} for alpha={alpha}"
        )
    M = noise.channel_count
    SmoothingSpec(B).check(N)
    base = _seed_tuple(seed)
    stats = null_statistics(
        detectors, noise, N, B, [base + (i,) for i in range(n_trials)], stride, workers
    )
    return {
        d: Calibration(
            detector=d,
            threshold=empirical_threshold(stats[:, j], alpha),
            alpha=alpha,
            n_trials=n_trials,
            seed=seed,
            N=N,
            M=M,
            B=B,
            stride=stride,
            noise_fingerprint=noise.fingerprint(),
            null_statistics=stats[:, j].copy(),
        )
        for j, d in enumerate(detectors)
    }


class CalibrationRegistry:
    """JSON store of calibrations keyed by detector, dimensions, noise, alpha, trials and seed."""

    def __init__(self, entries: dict | None = None):
        self.entries: dict[str, Calibration] = dict(entries or {})

    def put(self, cal: Calibration) -> str:
        self.entries[cal.key] = cal
        return cal.key

    def find(
        self,
        detector: Detector,
        N: int,
        M: int,
        B: int,
        noise_fingerprint: str | None = None,
        alpha: float | None = None,
        stride: int | None = None,
    ) -> Calibration | None:
        """First matching entry in key order, or ``None``."""
        for key in sorted(self.entries):
            cal = self.entries[key]
            if (cal.detector, cal.N, cal.M, cal.B) != (detector, N, M, B):
                continue
            if noise_fingerprint is not None and cal.noise_fingerprint != noise_fingerprint:
                continue
            if alpha is not None and not math.isclose(cal.alpha, alpha):
                continue
            if stride is not None and cal.stride != stride:
                continue
            return cal
        return None

    def to_dict(self) -> dict:
        return {"spec_version": 1, "calibrations": {k: v.to_dict() for k, v in sorted(self.entries.items())}}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "CalibrationRegistry":
        data = json.loads(Path(path).read_text())
        cals = data.get("calibrations", {})
        return cls({k: Calibration.from_dict(v) for k, v in cals.items()})


# ---------------------------------------------------------------- decisions


@dataclass
class DetectorReport:
    """Outcome of one test on one dataset."""

    detector: Detector
    freq_indices: np.ndarray
    values: np.ndarray
    threshold: float
    N: int
    calibration: dict | None = None
    elapsed: float = 0.0

    @property
    def aggregate(self) -> float:
        return float(np.max(self.values))

    @property
    def argmax(self) -> int:
        """Fourier index of the aggregate (smallest index on ties)."""
        return int(self.freq_indices[int(np.argmax(self.values))])

    @property
    def decision(self) -> str:
        return "H1" if self.aggregate >= self.threshold else "H0"

    def to_dict(self) -> dict:
        return {
            "detector": self.detector.key,
            "label": self.detector.label,
            "aggregate": self.aggregate,
            "argmax_freq_index": self.argmax,
            "threshold": self.threshold,
            "decision": self.decision,
            "N": self.N,
            "calibration": self.calibration,
            "elapsed_seconds": self.elapsed,
            "curve": {
                "freq_index": [int(k) for k in self.freq_indices],
                "value": [float(v) for v in self.values],
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorReport":
        return cls(
            detector=Detector.parse(d["detector"]),
            freq_indices=np.asarray(d["curve"]["freq_index"], dtype=np.int64),
            values=np.asarray(d["curve"]["value"], dtype=float),
            threshold=float(d["threshold"]),
            N=int(d["N"]),
            calibration=d.get("calibration"),
            elapsed=float(d.get("elapsed_seconds", 0.0)),
        )


def decide(
    detector: Detector,
    data: TimeSeriesBlock,
    smoothing: SmoothingSpec,
    grid: FrequencyGrid | None,
    threshold: float | Calibration,
) -> DetectorReport:
    """Run the pipeline on ``data``; H1 iff the aggregate reaches the threshold."""
    t0 = time.perf_counter()
    meta = None
    if isinstance(threshold, Calibration):
        meta = threshold.to_dict(include_null=False)
        threshold = threshold.threshold
    idx, values = statistic_curve(detector, data, smoothing, grid)
    return DetectorReport(
        detector=detector,
        freq_indices=np.asarray(idx),
        values=np.asarray(values, dtype=float),
        threshold=float(threshold),
        N=data.sample_count,
        calibration=meta,
        elapsed=time.perf_counter() - t0,
    )
