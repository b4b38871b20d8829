"""Monte-Carlo experiments: power tables, spike location, ESD fit, histograms.

Every random draw is keyed by a counter-derived seed so results do not depend
on the number of worker processes:

* power/calibration trials use ``(seed, row, hypothesis, trial)`` with
  hypothesis 0 for calibration nulls, 1 for H1 and 2 for fresh nulls,
* the spike, ESD-fit and histogram studies use ``(seed, 0, hypothesis, rep)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from ._parallel import map_ordered
from .detectors import (
    DEFAULT_DETECTORS,
    LE,
    Detector,
    aggregate_statistics,
    empirical_threshold,
)
from .rmt import esd_deviation, gamma_spectrum, mp_edges, phi
from .spectral import (
    FrequencyGrid,
    SmoothingSpec,
    coherence_eigenvalues,
    transposed_dft,
)
from .tsgen import (
    ArRankOne,
    FirRandomSphere,
    NoiseModel,
    generate_mixture,
    with_target_gamma,
)

log = logging.getLogger(__name__)

__all__ = [
    "SignalSpec",
    "ExperimentConfig",
    "Cell",
    "PowerRow",
    "PowerTable",
    "SpikeStudy",
    "MpFitStudy",
    "HistogramStudy",
    "run_power_experiment",
    "run_spike_study",
    "run_mpfit_study",
    "run_histogram_study",
    "write_manifest",
]

H0_CAL, H1, H0_FRESH = 0, 1, 2


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class SignalSpec:
    """How the H1 signal is built for each trial.

    Either ``target_gamma`` is set (the amplitude is solved so the peak
    frequency-domain SNR over the grid equals it; for FIR filters the peak of
    ``sum_k gamma_k``) or explicit amplitudes are given (``C`` for
    ``ar_rank_one``, ``amplitudes`` for ``fir_random_sphere``).
    """

    variant: str = "ar_rank_one"
    target_gamma: float | None = None
    C: float | None = None
    beta: float = 10 / 11
    L: int = 3
    ratios: tuple = (1.0,)
    amplitudes: tuple | None = None
    fixed_filter: bool = False

    def __post_init__(self):
        if self.variant not in (ArRankOne.variant, FirRandomSphere.variant):
            raise ValueError(f"unknown signal variant {self.variant!r}")
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        if self.amplitudes is not None:
            object.__setattr__(self, "amplitudes", tuple(float(a) for a in self.amplitudes))
        explicit = self.C is not None if self.variant == ArRankOne.variant else self.amplitudes is not None
        if explicit and self.target_gamma is not None:
            raise ValueError("target_gamma and explicit amplitudes are mutually exclusive")
        if not explicit and self.target_gamma is None:
            raise ValueError("either target_gamma or explicit amplitudes must be given")
        if self.target_gamma is not None and self.target_gamma < 0:
            raise ValueError(f"target_gamma must be non-negative, got {self.target_gamma}")

    @property
    def rank(self) -> int:
        if self.variant == ArRankOne.variant:
            return 1
        return len(self.amplitudes) if self.amplitudes is not None else len(self.ratios)

    def template(self, sphere_seed=0):
        if self.variant == ArRankOne.variant:
            return ArRankOne(C=self.C if self.C is not None else 1.0, beta=self.beta)
        amps = self.amplitudes if self.amplitudes is not None else self.ratios
        return FirRandomSphere(L=self.L, amplitudes=amps, sphere_seed=sphere_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        if self.amplitudes is not None:
            d["amplitudes"] = list(self.amplitudes)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "SignalSpec | None":
        if d is None:
            return None
        d = dict(d)
        for key in ("ratios", "amplitudes"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown signal keys {sorted(unknown)}")
        return cls(**d)


def _parse_detectors(items) -> tuple:
    return tuple(d if isinstance(d, Detector) else Detector.parse(d) for d in items)


@dataclass(frozen=True)
class ExperimentConfig:
    """Configuration shared by all studies.

    ``rows`` is a sequence of ``(N, M, B)``. Studies other than the power
    experiment use the first row only.
    """

    rows: tuple
    theta: float = 0.5
    noise_variance: float = 1.0
    signal: SignalSpec | None = None
    detectors: tuple = DEFAULT_DETECTORS
    alpha: float = 0.05
    n_calibration_trials: int = 2000
    n_power_trials: int = 2000
    n_type1_trials: int = 0
    n_reps: int = 50
    exclude_spikes: bool = False
    seed: int = 0
    stride: int = 1
    name: str = "experiment"
    spec_version: int = 1

    def __post_init__(self):
        rows = tuple(tuple(int(v) for v in r) for r in self.rows)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "detectors", _parse_detectors(self.detectors))
        if self.spec_version != 1:
            raise ValueError(f"unsupported spec_version {self.spec_version}")
        if not rows:
            raise ValueError("at least one (N, M, B) row is required")
        for N, M, B in rows:
            if B % 2:
                raise ValueError(f"row (N={N}, M={M}, B={B}): B must be even")
            if B + 1 > N:
                raise ValueError(f"row (N={N}, M={M}, B={B}): B + 1 must not exceed N")
            if not M < B + 1:
                raise ValueError(
                    f"row (N={N}, M={M}, B={B}): need M < B + 1 so that c = M/(B+1) < 1"
                )
            if self.signal is not None and self.signal.rank > M:
                raise ValueError(f"row (N={N}, M={M}, B={B}): rank K={self.signal.rank} exceeds M")
            for d in self.detectors:
                if d.k > M:
                    raise ValueError(f"row (N={N}, M={M}, B={B}): {d.label} needs k <= M")
        if not abs(self.theta) < 1:
            raise ValueError(f"theta must satisfy |theta| < 1, got {self.theta}")
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        for key in ("n_calibration_trials", "n_power_trials", "n_type1_trials", "n_reps"):
            if getattr(self, key) < 0:
                raise ValueError(f"{key} must be non-negative")

    def noise(self, M: int) -> NoiseModel:
        return NoiseModel.ar1(self.theta, M, self.noise_variance)

    def to_dict(self) -> dict:
        return {
            "spec_version": self.spec_version,
            "name": self.name,
            "rows": [list(r) for r in self.rows],
            "theta": self.theta,
            "noise_variance": self.noise_variance,
            "signal": None if self.signal is None else self.signal.to_dict(),
            "detectors": [d.key for d in self.detectors],
            "alpha": self.alpha,
            "n_calibration_trials": self.n_calibration_trials,
            "n_power_trials": self.n_power_trials,
            "n_type1_trials": self.n_type1_trials,
            "n_reps": self.n_reps,
            "exclude_spikes": self.exclude_spikes,
            "seed": self.seed,
            "stride": self.stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        if "signal" in d:
            d["signal"] = SignalSpec.from_dict(d["signal"])
        if "rows" in d:
            d["rows"] = tuple(tuple(r) for r in d["rows"])
        if "detectors" in d:
            d["detectors"] = _parse_detectors(d["detectors"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, **kw) -> "ExperimentConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)


# ---------------------------------------------------------------- trials


@dataclass(frozen=True)
class _Plan:
    """Everything a worker needs to build and score one dataset."""

    noise: NoiseModel
    N: int
    B: int
    stride: int
    detectors: tuple
    signal: object = None
    fir_target: float | None = None
    fir_fixed_seed: object = None


def _resolve_signal(plan: _Plan, seed):
    sig = plan.signal
    if isinstance(sig, FirRandomSphere):
        sig = sig.reseeded(plan.fir_fixed_seed if plan.fir_fixed_seed is not None else seed)
        if plan.fir_target is not None:
            grid = FrequencyGrid(plan.N, stride=plan.stride)
            sig = with_target_gamma(plan.noise, sig, plan.fir_target, grid, k_sum=sig.rank)
    return sig


def _run_trial(job):
    plan, seed, with_signal = job
    try:
        sig = _resolve_signal(plan, seed) if with_signal else None
        block = generate_mixture(plan.noise, sig, plan.N, seed)
        stats = aggregate_statistics(
            block, SmoothingSpec(plan.B), plan.detectors, FrequencyGrid(plan.N, stride=plan.stride)
        )
        return [stats[d] for d in plan.detectors], None
    except Exception as exc:  # recorded per trial, the cell keeps going
        return None, f"{type(exc).__name__}: {exc}"


def _run_batch(plan, seeds, with_signal, workers):
    results = map_ordered(_run_trial, [(plan, s, with_signal) for s in seeds], workers)
    stats = np.full((len(seeds), len(plan.detectors)), np.nan)
    errors = []
    for i, (vals, err) in enumerate(results):
        if vals is None:
            errors.append(f"trial {i}: {err}")
        else:
            stats[i] = vals
    return stats, errors


def _row_plan(config: ExperimentConfig, row_index: int) -> _Plan:
    N, M, B = config.rows[row_index]
    noise = config.noise(M)
    plan = _Plan(noise, N, B, config.stride, config.detectors)
    spec = config.signal
    if spec is None:
        return plan
    grid = FrequencyGrid(N, stride=config.stride)
    if spec.variant == ArRankOne.variant:
        sig = spec.template()
        if spec.target_gamma is not None:
            sig = with_target_gamma(noise, sig, spec.target_gamma, grid)
        return replace(plan, signal=sig)
    fixed = (config.seed, row_index) if spec.fixed_filter else None
    return replace(plan, signal=spec.template(), fir_target=spec.target_gamma, fir_fixed_seed=fixed)


# ---------------------------------------------------------------- power tables


@dataclass
class Cell:
    """Empirical power of one detector on one row."""

    power: float
    n_trials: int
    threshold: float
    type1: float = float("nan")
    n_type1: int = 0

    @property
    def se(self) -> float:
        if self.n_trials == 0:
            return float("nan")
        p = self.power
        return math.sqrt(p * (1.0 - p) / self.n_trials)


@dataclass
class PowerRow:
    N: int
    M: int
    B: int
    cells: dict = field(default_factory=dict)
    error: str | None = None
    trial_errors: list = field(default_factory=list)
    signal: dict | None = None
    null_statistics: np.ndarray | None = None
    alt_statistics: np.ndarray | None = None
    fresh_statistics: np.ndarray | None = None
    wall_time: float = 0.0

    @property
    def c(self) -> float:
        return self.M / (self.B + 1)


@dataclass
class PowerTable:
    """Power per (row, detector) plus the raw per-trial statistics."""

    detectors: tuple
    rows: list
    alpha: float
    seed: int
    config_digest: str = ""
    wall_time: float = 0.0

    CSV_FIELDS = (
        "N", "M", "B", "detector", "power", "se", "n_trials", "threshold",
        "type1", "n_type1", "error",
    )

    def cell(self, M: int, detector: Detector) -> Cell:
        for r in self.rows:
            if r.M == M:
                return r.cells[detector]
        raise KeyError(M)

    def csv_rows(self) -> list:
        out = []
        for r in self.rows:
            for d in self.detectors:
                c = r.cells.get(d)
                if c is None:
                    out.append([r.N, r.M, r.B, d.label, "", "", 0, "", "", 0, r.error or ""])
                    continue
                out.append([
                    r.N, r.M, r.B, d.label,
                    _fmt(c.power, 6), _fmt(c.se, 6), c.n_trials, _fmt(c.threshold, 10),
                    _fmt(c.type1, 6), c.n_type1, r.error or "",
                ])
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.CSV_FIELDS)
            w.writerows(self.csv_rows())

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()

        return {
            "detectors": [d.key for d in self.detectors],
            "alpha": self.alpha,
            "seed": self.seed,
            "config_digest": self.config_digest,
            "wall_time": self.wall_time,
            "rows": [
                {
                    "N": r.N, "M": r.M, "B": r.B, "error": r.error,
                    "trial_errors": r.trial_errors, "signal": r.signal,
                    "wall_time": r.wall_time,
                    "cells": {d.key: asdict(c) for d, c in r.cells.items()},
                    "null_statistics": arr(r.null_statistics),
                    "alt_statistics": arr(r.alt_statistics),
                    "fresh_statistics": arr(r.fresh_statistics),
                }
                for r in self.rows
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PowerTable":
        dets = tuple(Detector.parse(k) for k in d["detectors"])

        def arr(a):
            return None if a is None else np.asarray(a, dtype=float)

        rows = [
            PowerRow(
                N=r["N"], M=r["M"], B=r["B"], error=r.get("error"),
                trial_errors=r.get("trial_errors", []), signal=r.get("signal"),
                wall_time=r.get("wall_time", 0.0),
                cells={Detector.parse(k): Cell(**v) for k, v in r["cells"].items()},
                null_statistics=arr(r.get("null_statistics")),
                alt_statistics=arr(r.get("alt_statistics")),
                fresh_statistics=arr(r.get("fresh_statistics")),
            )
            for r in d["rows"]
        ]
        return cls(dets, rows, d["alpha"], d["seed"], d.get("config_digest", ""), d.get("wall_time", 0.0))


def _fmt(x: float, digits: int) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.{digits}f}"


def _rate(stats: np.ndarray, threshold: float) -> tuple[float, int]:
    ok = stats[~np.isnan(stats)]
    if ok.size == 0:
        return float("nan"), 0
    return float(np.mean(ok >= threshold)), int(ok.size)


def run_power_experiment(
    config: ExperimentConfig, workers: int | None = 1, row_indices: Sequence[int] | None = None
) -> PowerTable:
    """Calibrate every detector per row on H0, then estimate power on H1.

    A row that fails is recorded with its error message and the remaining rows
    still run. Trials that fail individually are excluded from the counts.
    ``row_indices`` restricts the run to some rows; each keeps the seeds it has
    in the full table.
    """
    if config.signal is None:
        raise ValueError("a power experiment needs a signal in the configuration")
    if row_indices is None:
        row_indices = range(len(config.rows))
    t_start = time.perf_counter()
    rows = []
    for r in row_indices:
        N, M, B = config.rows[r]
        t0 = time.perf_counter()
        row = PowerRow(N, M, B)
        try:
            plan = _row_plan(config, r)
            if plan.signal is not None:
                from .tsgen import signal_to_dict

                row.signal = signal_to_dict(plan.signal)
            log.info("row N=%d M=%d B=%d: %d calibration trials", N, M, B, config.n_calibration_trials)
            null, err0 = _run_batch(
                plan, [(config.seed, r, H0_CAL, i) for i in range(config.n_calibration_trials)],
                False, workers,
            )
            log.info("row N=%d M=%d B=%d: %d power trials", N, M, B, config.n_power_trials)
            alt, err1 = _run_batch(
                plan, [(config.seed, r, H1, i) for i in range(config.n_power_trials)], True, workers
            )
            fresh, err2 = None, []
            if config.n_type1_trials:
                fresh, err2 = _run_batch(
                    plan, [(config.seed, r, H0_FRESH, i) for i in range(config.n_type1_trials)],
                    False, workers,
                )
            row.trial_errors = err0 + err1 + err2
            row.null_statistics, row.alt_statistics, row.fresh_statistics = null, alt, fresh
            for j, d in enumerate(config.detectors):
                col = null[:, j]
                threshold = empirical_threshold(col[~np.isnan(col)], config.alpha)
                power, n = _rate(alt[:, j], threshold)
                cell = Cell(power, n, threshold)
                if fresh is not None:
                    cell.type1, cell.n_type1 = _rate(fresh[:, j], threshold)
                row.cells[d] = cell
        except Exception as exc:
            log.exception("row N=%d M=%d B=%d failed", N, M, B)
            row.error = f"{type(exc).__name__}: {exc}"
        row.wall_time = time.perf_counter() - t0
        rows.append(row)
    return PowerTable(
        config.detectors, rows, config.alpha, config.seed, config.digest(),
        time.perf_counter() - t_start,
    )


# ---------------------------------------------------------------- spike study


def _study_signal(config: ExperimentConfig):
    N, M, B = config.rows[0]
    if config.signal is None:
        return None
    return _resolve_signal(_row_plan(config, 0), (config.seed, 0, H1, 0))


@dataclass
class SpikeStudy:
    """Largest coherence eigenvalue at the peak-SNR frequency, per repetition."""

    c: float
    freq_index: int
    gamma_star: float
    phi_star: float
    lambda1: np.ndarray
    curve: dict | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(self.lambda1)) if self.lambda1.size else float("nan")

    @property
    def std(self) -> float:
        return float(np.std(self.lambda1, ddof=1)) if self.lambda1.size > 1 else float("nan")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rep", "freq_index", "nu_star", "lambda1", "phi_gamma"])
            nu = self.freq_index / self.curve["N"] if self.curve else float("nan")
            for i, v in enumerate(self.lambda1):
                w.writerow([i, self.freq_index, f"{nu:.10f}", f"{v:.10f}", f"{self.phi_star:.10f}"])
            w.writerow(["mean", self.freq_index, f"{nu:.10f}", _fmt(self.mean, 10), f"{self.phi_star:.10f}"])
            w.writerow(["std", self.freq_index, f"{nu:.10f}", _fmt(self.std, 10), ""])

    def write_curve_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["freq_index", "nu", "lambda1", "gamma", "phi_gamma", "lambda_plus"])
            if not self.curve:
                return
            cv = self.curve
            for k, lam, g, p in zip(cv["freq_index"], cv["lambda1"], cv["gamma"], cv["phi_gamma"]):
                w.writerow([int(k), f"{k / cv['N']:.10f}", f"{lam:.10f}", f"{g:.10f}",
                            f"{p:.10f}", f"{cv['lambda_plus']:.10f}"])


def _spike_rep(job):
    noise, sig, N, B, k_star, seed = job
    block = generate_mixture(noise, sig, N, seed)
    XT = transposed_dft(block)
    grid = FrequencyGrid(N, indices=(k_star,))
    return float(coherence_eigenvalues(XT.T, SmoothingSpec(B), grid, k=1)[0, 0])


def run_spike_study(
    config: ExperimentConfig, n_reps: int | None = None, workers: int | None = 1, curve: bool = True
) -> SpikeStudy:
    """``lambda_1(C(nu*))`` over ``n_reps`` H1 datasets, with ``nu*`` the peak of ``gamma``.

    With ``curve`` set, the first repetition also yields the whole
    ``lambda_1(C(nu))`` curve next to ``phi(gamma(nu))``.
    """
    n_reps = config.n_reps if n_reps is None else n_reps
    N, M, B = config.rows[0]
    noise = config.noise(M)
    sig = _study_signal(config)
    c = M / (B + 1)
    grid = FrequencyGrid(N, stride=config.stride)
    spec = gamma_spectrum(noise, sig, grid, 1)
    k_star = int(grid.index_array[spec.argmax])
    g_star = spec.peak()
    seeds = [(config.seed, 0, H1, i) for i in range(n_reps)]
    lam = map_ordered(_spike_rep, [(noise, sig, N, B, k_star, s) for s in seeds], workers)
    curve_data = {"N": N}
    if curve and n_reps:
        block = generate_mixture(noise, sig, N, seeds[0])
        lam1 = coherence_eigenvalues(transposed_dft(block).T, SmoothingSpec(B), grid, k=1)[:, 0]
        g = spec.gammas[:, 0]
        curve_data.update(
            freq_index=grid.index_array, lambda1=lam1, gamma=g,
            phi_gamma=phi(g, c), lambda_plus=mp_edges(c)[1],
        )
    return SpikeStudy(c, k_star, g_star, float(phi(g_star, c)), np.asarray(lam), curve_data)


# ---------------------------------------------------------------- ESD fit


@dataclass
class MpFitStudy:
    c: float
    sup_distances: np.ndarray
    curves: object = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rep", "sup_distance"])
            for i, v in enumerate(self.sup_distances):
                w.writerow([i, f"{v:.10f}"])


def _mpfit_rep(job):
    noise, sig, N, B, stride, c, exclude, seed = job
    block = generate_mixture(noise, sig, N, seed)
    eig = coherence_eigenvalues(
        transposed_dft(block).T, SmoothingSpec(B), FrequencyGrid(N, stride=stride)
    )
    if exclude:
        eig = eig[:, exclude:]
    return esd_deviation(eig, c)


def run_mpfit_study(
    config: ExperimentConfig, n_reps: int | None = None, workers: int | None = 1
) -> MpFitStudy:
    """ESD deviation from the Marcenko-Pastur CDF over every grid frequency, per repetition.

    Runs under H0 when the config has no signal. With ``exclude_spikes`` the
    ``K`` largest eigenvalues of each frame are dropped before forming the ESD.
    """
    n_reps = config.n_reps if n_reps is None else n_reps
    N, M, B = config.rows[0]
    noise = config.noise(M)
    sig = _study_signal(config)
    c = M / (B + 1)
    hyp = H0_CAL if sig is None else H1
    exclude = sig.rank if (config.exclude_spikes and sig is not None) else 0
    jobs = [(noise, sig, N, B, config.stride, c, exclude, (config.seed, 0, hyp, i)) for i in range(n_reps)]
    curves = map_ordered(_mpfit_rep, jobs, workers)
    sup = np.array([cv.sup_distance for cv in curves])
    return MpFitStudy(c, sup, curves[0] if curves else None)


# ---------------------------------------------------------------- histograms


@dataclass
class HistogramStudy:
    h0: np.ndarray
    h1: np.ndarray
    bin_width: float = 0.05
    threshold: float = float("nan")

    def bins(self):
        both = np.concatenate([self.h0, self.h1])
        both = both[~np.isnan(both)]
        if both.size == 0:
            return np.zeros(0), np.zeros(0, int), np.zeros(0, int)
        lo = math.floor(both.min() / self.bin_width)
        hi = math.floor(both.max() / self.bin_width) + 1
        edges = np.arange(lo, hi + 1) * self.bin_width
        c0 = np.histogram(self.h0, edges)[0]
        c1 = np.histogram(self.h1, edges)[0]
        return edges, c0, c1

    def write_csv(self, path) -> None:
        edges, c0, c1 = self.bins()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "count_h0", "count_h1"])
            for i in range(len(c0)):
                w.writerow([f"{edges[i]:.4f}", f"{edges[i + 1]:.4f}", int(c0[i]), int(c1[i])])

    def write_samples_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["rep", "statistic_h0", "statistic_h1"])
            for i, (a, b) in enumerate(zip(self.h0, self.h1)):
                w.writerow([i, _fmt(a, 10), _fmt(b, 10)])


def run_histogram_study(
    config: ExperimentConfig,
    n_reps: int | None = None,
    workers: int | None = 1,
    detector: Detector = LE,
) -> HistogramStudy:
    """Aggregate statistic under H0 and H1 for ``n_reps`` datasets each."""
    n_reps = config.n_reps if n_reps is None else n_reps
    N, M, B = config.rows[0]
    plan = replace(_row_plan(config, 0), detectors=(detector,))
    if n_reps == 0:
        return HistogramStudy(np.zeros(0), np.zeros(0))
    h0, _ = _run_batch(plan, [(config.seed, 0, H0_CAL, i) for i in range(n_reps)], False, workers)
    if config.signal is None:
        h1 = np.full_like(h0, np.nan)
    else:
        h1, _ = _run_batch(plan, [(config.seed, 0, H1, i) for i in range(n_reps)], True, workers)
    return HistogramStudy(h0[:, 0], h1[:, 0], threshold=detector.null_level(M / (B + 1)))


# ---------------------------------------------------------------- manifest


def write_manifest(path, config: ExperimentConfig | None, status: str, outputs: Sequence[str] = (),
                   wall_time: float = 0.0, workers: int | None = None, extra: dict | None = None) -> None:
    """Record configuration digest, seeds, versions, timing and outputs."""
    import numba
    import scipy

    doc = {
        "status": status,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
        "workers": workers,
        "wall_time_seconds": wall_time,
        "outputs": list(outputs),
    }
    if config is not None:
        doc.update(config_digest=config.digest(), seed=config.seed, config=config.to_dict())
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
