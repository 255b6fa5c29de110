"""Five-layer convolutional digit recognizer on a simulated SIMT runtime."""

from .core import HAVE_COMPILED, IMPLEMENTATION
from .errors import (
    BarrierDivergenceError,
    ClassificationError,
    ConfigurationError,
    DataRaceError,
    DimensionError,
    FormatError,
    LaunchError,
    NumericDomainError,
    SimtCnnError,
    TrainingError,
)
from .kernels import THREAD_SETTINGS, forward_parallel, kernel_classify, kernel_convolution
from .mnist import load_idx_images, load_idx_labels, load_weights, preprocess, save_weights
from .network import (
    AuditReport,
    ForwardResult,
    SimilarityVector,
    activation_phi,
    audit_counts,
    classify_argmax,
    forward_serial,
)
from .numerics import AccumMode, accumulate, recognition_stddev, throughput_bench
from .simt import CONCURRENT, DETERMINISTIC, Dim, LaunchConfig, SimtRuntime, launch_kernel
from .tensors import LAYERS, FeatureMap, LayerWeights, Network, make_weight_set
from .trainer import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "AccumMode", "AuditReport", "BarrierDivergenceError", "CONCURRENT", "ClassificationError",
    "ConfigurationError", "DETERMINISTIC", "DataRaceError", "Dim", "DimensionError",
    "FeatureMap", "FormatError", "ForwardResult", "HAVE_COMPILED", "IMPLEMENTATION", "LAYERS",
    "LaunchConfig", "LaunchError", "LayerWeights", "Network", "NumericDomainError",
    "SimilarityVector", "SimtCnnError", "SimtRuntime", "THREAD_SETTINGS", "TrainConfig",
    "TrainingError", "accumulate", "activation_phi", "audit_counts", "classify_argmax",
    "evaluate", "forward_parallel", "forward_serial", "kernel_classify", "kernel_convolution",
    "launch_kernel", "load_idx_images", "load_idx_labels", "load_weights", "make_weight_set",
    "preprocess", "recognition_stddev", "save_weights", "throughput_bench", "train",
]
