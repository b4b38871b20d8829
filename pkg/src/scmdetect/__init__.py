"""Detection of low-rank signals in high-dimensional multichannel time series
from the eigenvalues of the sample spectral coherence matrix."""

__version__ = "0.1.0"

from .tsgen import (  # noqa: E402
    ArRankOne,
    FirRandomSphere,
    NoiseModel,
    SimulationConfig,
    TimeSeriesBlock,
    generate_mixture,
    generate_noise,
    generate_signal,
    solve_amplitude_for_target_gamma,
)
from .spectral import (  # noqa: E402
    FrequencyGrid,
    SmoothingSpec,
    SpectralFrame,
    coherence,
    dft_frame,
    eig_hermitian,
    smoothed_periodogram,
    true_spectra,
)
from .rmt import MarcenkoPastur, gamma_spectrum, mp_cdf, mp_density, mp_edges, phi  # noqa: E402
from .detectors import (  # noqa: E402
    Detector,
    DetectorReport,
    aggregate_statistics,
    calibrate,
    decide,
)
from .harness import ExperimentConfig, run_power_experiment  # noqa: E402
