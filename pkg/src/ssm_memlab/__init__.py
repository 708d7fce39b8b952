"""Selective state-space toy models and the memory analyses run on them."""

from .errors import (
    ConfigError,
    ContractViolation,
    MemlabError,
    NumericalFailure,
    NumericalInputError,
    VocabularyError,
)
from .kernels import BACKEND
from .model import (
    GateTrace,
    HiddenInit,
    ModelConfig,
    ModelParams,
    StepGates,
    compute_gates,
    forward,
    forward_batch,
    init_params,
    scan_step,
    unroll_kernel,
)
from .taskgen import RecallInstance, Vocab, default_vocab, gen_dataset, gen_instance, gen_periodic
from .train import TrainConfig, backward, train_loop
from .checkpoint import load_checkpoint, save_checkpoint
from .memlab import InterventionSpec, eval_recall_curve, identify_ltm, memory_coefficients

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "ContractViolation",
    "GateTrace",
    "HiddenInit",
    "InterventionSpec",
    "MemlabError",
    "ModelConfig",
    "ModelParams",
    "NumericalFailure",
    "NumericalInputError",
    "RecallInstance",
    "StepGates",
    "TrainConfig",
    "Vocab",
    "VocabularyError",
    "backward",
    "compute_gates",
    "default_vocab",
    "eval_recall_curve",
    "forward",
    "forward_batch",
    "gen_dataset",
    "gen_instance",
    "gen_periodic",
    "identify_ltm",
    "init_params",
    "load_checkpoint",
    "memory_coefficients",
    "save_checkpoint",
    "scan_step",
    "train_loop",
    "unroll_kernel",
]
