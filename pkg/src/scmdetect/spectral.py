"""Finite Fourier transform, smoothed periodogram and spectral coherence.

The smoothed periodogram at Fourier index ``k`` averages the ``B + 1``
outer products ``xi(j/N) xi(j/N)^*`` for ``j = k - B/2, ..., k + B/2`` taken
modulo ``N``. Successive grid points are obtained by a sliding rank-one
update with an exact recomputation every ``refresh`` steps.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from . import _kernels
from .tsgen import NoiseModel, SignalModel, TimeSeriesBlock

__all__ = [
    "DegenerateDiagonal",
    "FrequencyGrid",
    "SmoothingSpec",
    "SpectralFrame",
    "TrueSpectra",
    "REFRESH_INTERVAL",
    "dft_frame",
    "transposed_dft",
    "smoothed_periodogram",
    "iter_periodogram",
    "coherence",
    "coherence_frames",
    "coherence_eigenvalues",
    "eig_hermitian",
    "true_spectra",
    "write_frames_csv",
    "write_eigenvalues_csv",
    "write_frame_cache",
    "read_frame_cache",
]

REFRESH_INTERVAL = 1024
DIAG_FLOOR = _kernels.DIAG_FLOOR
FRAME_MAGIC = b"SCFR1"
_FRAME_HEADER = struct.Struct("<5sIQB")
_KIND_CODES = {"periodogram": 0, "coherence": 1, "surrogate": 2}


class DegenerateDiagonal(ValueError):
    """A periodogram diagonal entry is at or below the relative floor."""


@dataclass(frozen=True)
class FrequencyGrid:
    """Fourier indices ``k`` (frequencies ``k / N``) at which frames are evaluated.

    Parameters
    ----------
    n_samples : int
        Series length ``N``.
    indices : sequence of int, optional
        Strictly increasing subset of ``0..N-1``; all indices by default.
    stride : int
        Keep every ``stride``-th entry of ``indices``.
    """

    n_samples: int
    indices: tuple | None = None
    stride: int = 1

    def __post_init__(self):
        N = int(self.n_samples)
        if N < 1:
            raise ValueError(f"n_samples must be >= 1, got {N}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=np.int64).ravel()
            if idx.size == 0:
                raise ValueError("grid must contain at least one index")
            if np.any(np.diff(idx) <= 0):
                raise ValueError("grid indices must be strictly increasing")
            if idx[0] < 0 or idx[-1] >= N:
                raise ValueError(f"grid indices must lie in [0, {N - 1}]")
            object.__setattr__(self, "indices", tuple(int(i) for i in idx))

    @property
    def index_array(self) -> np.ndarray:
        if self.indices is None:
            return np.arange(0, self.n_samples, self.stride, dtype=np.int64)
        return np.asarray(self.indices, dtype=np.int64)[:: self.stride]

    @property
    def frequencies(self) -> np.ndarray:
        return self.index_array / self.n_samples

    def __len__(self) -> int:
        return self.index_array.size


@dataclass(frozen=True)
class SmoothingSpec:
    """Even smoothing span ``B``; each frame averages ``B + 1`` DFT outer products."""

    B: int

    def __post_init__(self):
        if self.B < 0 or self.B % 2:
            raise ValueError(f"smoothing span B must be a non-negative even integer, got {self.B}")

    @property
    def window(self) -> int:
        return self.B + 1

    def check(self, n_samples: int) -> None:
        if self.B + 1 > n_samples:
            raise ValueError(f"B + 1 = {self.B + 1} exceeds the series length N = {n_samples}")

    def shape_ratio(self, channel_count: int) -> float:
        """``c = M / (B + 1)``."""
        return channel_count / (self.B + 1)


@dataclass
class SpectralFrame:
    """One ``M x M`` Hermitian matrix at Fourier index ``freq_index``."""

    freq_index: int
    matrix: np.ndarray
    kind: str = "periodogram"

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown frame kind {self.kind!r}")
        a = np.asarray(self.matrix, dtype=np.complex128)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError(f"frame matrix must be square, got shape {a.shape}")
        self.matrix = a

    @property
    def channel_count(self) -> int:
        return self.matrix.shape[0]

    def hermitian_defect(self) -> float:
        a = self.matrix
        norm = np.linalg.norm(a)
        return 0.0 if norm == 0 else float(np.linalg.norm(a - a.conj().T) / norm)


@dataclass
class TrueSpectra:
    """Model spectra at a set of frequencies.

    ``noise`` holds the diagonal of ``S_v`` with shape ``(n, M)``, ``transfer``
    is ``H`` with shape ``(n, M, K)`` and ``total`` is ``S_y = H H^* + S_v``.
    """

    frequencies: np.ndarray
    noise: np.ndarray
    transfer: np.ndarray
    total: np.ndarray


# ---------------------------------------------------------------- DFT


def dft_frame(block: TimeSeriesBlock | np.ndarray) -> np.ndarray:
    """Renormalized DFT, column ``k`` is ``N^{-1/2} sum_n y_n exp(-2 i pi n k / N)``."""
    y = block.samples if isinstance(block, TimeSeriesBlock) else np.asarray(block)
    if y.ndim != 2:
        raise ValueError(f"expected an (M, N) array, got shape {y.shape}")
    return np.fft.fft(y, axis=1) / np.sqrt(y.shape[1])


def transposed_dft(block: TimeSeriesBlock | np.ndarray) -> np.ndarray:
    """DFT as a C-contiguous ``(N, M)`` array, the layout the kernels expect."""
    y = block.samples if isinstance(block, TimeSeriesBlock) else np.asarray(block)
    return np.ascontiguousarray(np.fft.fft(y.T, axis=0) / np.sqrt(y.shape[1]))


def _prepare(dft: np.ndarray, smoothing: SmoothingSpec, grid: FrequencyGrid | None):
    dft = np.asarray(dft, dtype=np.complex128)
    if dft.ndim != 2:
        raise ValueError(f"expected an (M, N) DFT array, got shape {dft.shape}")
    M, N = dft.shape
    smoothing.check(N)
    if grid is None:
        grid = FrequencyGrid(N)
    elif grid.n_samples != N:
        raise ValueError(f"grid is for N={grid.n_samples} but the DFT has N={N}")
    return np.ascontiguousarray(dft.T), grid.index_array


# ---------------------------------------------------------------- periodogram


def iter_periodogram(
    dft: np.ndarray,
    smoothing: SmoothingSpec,
    grid: FrequencyGrid | None = None,
    chunk: int = 256,
    refresh: int = REFRESH_INTERVAL,
) -> Iterator[SpectralFrame]:
    """Yield periodogram frames in grid order, ``chunk`` frames at a time."""
    XT, idx = _prepare(dft, smoothing, grid)
    for start in range(0, idx.size, chunk):
        part = idx[start : start + chunk]
        mats = _kernels.sliding_frames(XT, smoothing.B, part, refresh)
        for k, mat in zip(part, mats):
            yield SpectralFrame(int(k), mat, "periodogram")


def smoothed_periodogram(
    dft: np.ndarray,
    smoothing: SmoothingSpec,
    grid: FrequencyGrid | None = None,
    refresh: int = REFRESH_INTERVAL,
) -> list[SpectralFrame]:
    """Smoothed periodogram frames on ``grid`` (all Fourier indices by default)."""
    XT, idx = _prepare(dft, smoothing, grid)
    mats = _kernels.sliding_frames(XT, smoothing.B, idx, refresh)
    return [SpectralFrame(int(k), m, "periodogram") for k, m in zip(idx, mats)]


def coherence(frame: SpectralFrame) -> SpectralFrame:
    """Normalize a periodogram frame by its diagonal.

    Raises
    ------
    DegenerateDiagonal
        If some diagonal entry is at or below ``1e-14 * trace / M``.
    """
    a = frame.matrix
    M = a.shape[0]
    d = a.diagonal().real.copy()
    floor = DIAG_FLOOR * d.sum() / M
    bad = np.flatnonzero(~(d > floor))
    if bad.size:
        raise DegenerateDiagonal(
            f"frame {frame.freq_index}: channel(s) {bad.tolist()} have diagonal <= {floor:.3g}"
        )
    s = 1.0 / np.sqrt(d)
    c = a * s[:, None] * s[None, :]
    c = 0.5 * (c + c.conj().T)
    np.fill_diagonal(c, 1.0)
    return SpectralFrame(frame.freq_index, c, "coherence")


def coherence_frames(
    dft: np.ndarray, smoothing: SmoothingSpec, grid: FrequencyGrid | None = None
) -> list[SpectralFrame]:
    return [coherence(f) for f in smoothed_periodogram(dft, smoothing, grid)]


def coherence_eigenvalues(
    dft: np.ndarray,
    smoothing: SmoothingSpec,
    grid: FrequencyGrid | None = None,
    k: int | None = None,
    refresh: int = REFRESH_INTERVAL,
) -> np.ndarray:
    """Descending coherence eigenvalues per grid frequency, shape ``(n, k)``.

    Equivalent to ``eig_hermitian(coherence(frame))`` on every periodogram
    frame, without materializing the frames.
    """
    XT, idx = _prepare(dft, smoothing, grid)
    M = XT.shape[1]
    k = M if k is None else int(k)
    if not 1 <= k <= M:
        raise ValueError(f"k must lie in [1, {M}], got {k}")
    vals, status = _kernels.frame_eigenvalues(XT, smoothing.B, idx, refresh, k)
    check_status(status, idx)
    return vals


def check_status(status: np.ndarray, idx: np.ndarray) -> None:
    bad = np.flatnonzero(status == _kernels.DEGENERATE)
    if bad.size:
        raise DegenerateDiagonal(
            f"degenerate periodogram diagonal at {bad.size} frequencies, first index {idx[bad[0]]}"
        )


# ---------------------------------------------------------------- eigenvalues


def eig_hermitian(
    frame: SpectralFrame | np.ndarray,
    k: int | None = None,
    tol: float = 1e-10,
    max_iter: int | None = None,
) -> np.ndarray:
    """Real eigenvalues in descending order.

    With ``k`` set, only the ``k`` largest are computed by implicitly restarted
    Lanczos iteration (at most ``10 * M`` iterations by default). If that does
    not converge, the full dense solve is used and a warning is issued.
    """
    a = frame.matrix if isinstance(frame, SpectralFrame) else np.asarray(frame)
    a = 0.5 * (a + a.conj().T)
    M = a.shape[0]
    if k is None or k >= M - 1 or M < 8:
        w = np.linalg.eigvalsh(a)[::-1]
        return w if k is None else w[:k].copy()
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    try:
        w = eigsh(a, k=k, which="LA", tol=tol, maxiter=max_iter or 10 * M, return_eigenvectors=False)
    except ArpackNoConvergence:
        warnings.warn(
            f"Lanczos did not converge for k={k}, M={M}; using the full eigensolver",
            RuntimeWarning,
            stacklevel=2,
        )
        return np.linalg.eigvalsh(a)[::-1][:k].copy()
    return np.sort(w.real)[::-1]


# ---------------------------------------------------------------- model spectra


def true_spectra(noise: NoiseModel, signal: SignalModel | None, nu) -> TrueSpectra:
    """``S_v``, ``H`` and ``S_y = H H^* + S_v`` of the model at frequencies ``nu``."""
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    M = noise.channel_count
    sv = noise.spectral_density(nu)
    if signal is None:
        H = np.zeros((nu.size, M, 0), dtype=np.complex128)
    else:
        H = signal.transfer(nu, M)
    total = H @ H.conj().transpose(0, 2, 1)
    idx = np.arange(M)
    total[:, idx, idx] += sv
    return TrueSpectra(nu, sv, H, total)


# ---------------------------------------------------------------- export


def write_frames_csv(path, frames: Sequence[SpectralFrame]) -> None:
    """One row per matrix entry: ``freq_index, i, j, re, im``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_index", "i", "j", "re", "im"])
        for f in frames:
            M = f.channel_count
            for i in range(M):
                for j in range(M):
                    z = f.matrix[i, j]
                    w.writerow([f.freq_index, i, j, repr(float(z.real)), repr(float(z.imag))])


def write_eigenvalues_csv(path, freq_indices, eigenvalues) -> None:
    """One row per eigenvalue: ``freq_index, rank, value`` (rank 1 is the largest)."""
    eigenvalues = np.atleast_2d(eigenvalues)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_index", "rank", "value"])
        for k, vals in zip(freq_indices, eigenvalues):
            for r, v in enumerate(vals, start=1):
                w.writerow([int(k), r, repr(float(v))])


def write_frame_cache(path, frames: Sequence[SpectralFrame]) -> None:
    """Binary ``SCFR1`` cache: header then ``(u64 freq_index, M*M c16)`` records."""
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to write")
    M = frames[0].channel_count
    kind = frames[0].kind
    if any(f.channel_count != M or f.kind != kind for f in frames):
        raise ValueError("all cached frames must share M and kind")
    with open(path, "wb") as fh:
        fh.write(_FRAME_HEADER.pack(FRAME_MAGIC, M, len(frames), _KIND_CODES[kind]))
        for f in frames:
            fh.write(struct.pack("<Q", f.freq_index))
            fh.write(np.ascontiguousarray(f.matrix, dtype="<c16").tobytes())


def read_frame_cache(path) -> list[SpectralFrame]:
    raw = Path(path).read_bytes()
    if len(raw) < _FRAME_HEADER.size:
        raise ValueError(f"{path}: too short for an SCFR1 header")
    magic, M, count, code = _FRAME_HEADER.unpack_from(raw)
    if magic != FRAME_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    kinds = {v: k for k, v in _KIND_CODES.items()}
    if code not in kinds:
        raise ValueError(f"{path}: unknown frame kind code {code}")
    rec = 8 + 16 * M * M
    if len(raw) != _FRAME_HEADER.size + rec * count:
        raise ValueError(f"{path}: size does not match {count} frames of M={M}")
    frames = []
    off = _FRAME_HEADER.size
    for _ in range(count):
        (k,) = struct.unpack_from("<Q", raw, off)
        mat = np.frombuffer(raw, dtype="<c16", count=M * M, offset=off + 8).reshape(M, M)
        frames.append(SpectralFrame(int(k), mat.astype(np.complex128), kinds[code]))
        off += rec
    return frames
