"""Optimally deep networks: progressive depth-expansion training and tooling."""

from .accounting import ModelStats, reduction_percent, stats_at_depth, verify_against_instantiated
from .data import Dataset, SynthSpec, batches, load_cifar10_binary, load_idx, normalize, \
    pad_and_expand, split, synthesize
from .estimator import OptimallyDeepClassifier
from .network import DepthPartitionedNetwork, ExtractedNetwork, build_network, extract_odn
from .search import (
    Action,
    ConvergenceTracker,
    SearchConfig,
    SearchResult,
    evaluate,
    finetune,
    observe_epoch,
    search,
    train_depth_to_convergence,
    warmup,
)
from .tensor import OptimizerConfig, Parameter, Tensor, sgd_step

__version__ = "0.1.0"

__all__ = [
    "Action", "ConvergenceTracker", "Dataset", "DepthPartitionedNetwork",
    "ExtractedNetwork", "ModelStats", "OptimallyDeepClassifier", "OptimizerConfig",
    "Parameter", "SearchConfig", "SearchResult", "SynthSpec", "Tensor", "batches",
    "build_network", "evaluate", "extract_odn", "finetune", "load_cifar10_binary",
    "load_idx", "normalize", "observe_epoch", "pad_and_expand", "reduction_percent",
    "search", "sgd_step", "split", "stats_at_depth", "synthesize",
    "train_depth_to_convergence", "verify_against_instantiated", "warmup",
]
