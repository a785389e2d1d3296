"""endmix: endmember detection in reflectance spectra.

Learns binary fluctuation representations of spectra through hidden Markov
chains over wavelet scales, trains per-class naive Bayes detectors on
selected features, and benchmarks them against sparse-unmixing baselines
on synthetic nonlinear mixtures.
"""

from .config import RunConfig, config_hash, dump_config, load_config
from .detector import (
    DetectorBank,
    DetectorModel,
    augment_library,
    detect,
    train_detector_bank,
)
from .evaluation import ConfusionCounts, RocMesh, d_roc, nonlinearity_score, recall_far
from .mixing import (
    HapkeGeometry,
    MixtureSpec,
    NoiseSpec,
    add_noise,
    generate_mixture_set,
    mix,
    mix_hapke,
    reflectance_to_ssa,
    sample_abundances,
    ssa_to_reflectance,
)
from .nhmc import EmConfig, NhmcModel, label_features, log_likelihood, train_nhmc
from .pipeline import run_report
from .sparse import AdmmConfig, clsunsal, nnls, sunsal, threshold_detect
from .spectral import (
    SpectralLibrary,
    Spectrum,
    generate_synthetic_library,
    load_library,
    save_library,
    split_train_test_kmeans,
)
from .wavelet import WaveletMatrix, uwt

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "AdmmConfig",
    "ConfusionCounts",
    "DetectorBank",
    "DetectorModel",
    "EmConfig",
    "HapkeGeometry",
    "MixtureSpec",
    "NhmcModel",
    "NoiseSpec",
    "RocMesh",
    "RunConfig",
    "SpectralLibrary",
    "Spectrum",
    "WaveletMatrix",
    "add_noise",
    "augment_library",
    "clsunsal",
    "config_hash",
    "d_roc",
    "detect",
    "dump_config",
    "generate_mixture_set",
    "generate_synthetic_library",
    "label_features",
    "load_config",
    "load_library",
    "log_likelihood",
    "mix",
    "mix_hapke",
    "nnls",
    "nonlinearity_score",
    "recall_far",
    "reflectance_to_ssa",
    "run_report",
    "sample_abundances",
    "save_library",
    "split_train_test_kmeans",
    "ssa_to_reflectance",
    "sunsal",
    "threshold_detect",
    "train_detector_bank",
    "train_nhmc",
    "uwt",
]
