"""Desk-scale laboratory for selective state-space recurrences.

Exact FP64 reference arithmetic, software-emulated reduced precision,
parallel-scan evaluation, stability probes, and tied low-rank adaptation
of a small trainable sequence model.
"""

__version__ = "0.1.0"

from .numerics import NumericFormat, quantize, sigmoid, silu, softplus
from .ssm import (
    BufferMode,
    FusedBuffer,
    MambaParams,
    mamba_backward,
    mamba_forward,
    random_contracting_params,
    random_params,
    scan_parallel,
    scan_sequential,
)
from .dynamics import (
    DivergenceTrace,
    LyapunovEstimate,
    Perturb,
    PrecisionDivergence,
    divergence_probe,
    fit_deviation_rate,
    lyapunov_closed_form,
    lyapunov_numeric,
    precision_divergence,
)
from .lora import (
    LoraAdapter,
    TargetStrategy,
    TyingReport,
    attach_lora,
    load_adapters,
    merged_weight,
    save_adapters,
    select_targets,
    trainable_param_count,
    verify_tying,
)
from .checkpoint import CheckpointError, load_checkpoint, load_tensors, save_checkpoint, save_tensors
from .data import BatchStream, gen_selective_copy, load_text_corpus
from .model import ToyModel, init_toy_model, load_model, save_model
from .train import (
    PrecisionPolicy,
    TrainConfig,
    TrainMetrics,
    evaluate,
    policy_preset,
    train_loop,
)
from .memory import MemoryMeter, memory_meter, reset_memory_meter, tracked

__all__ = [
    "__version__",
    "NumericFormat", "quantize", "sigmoid", "silu", "softplus",
    "BufferMode", "FusedBuffer", "MambaParams",
    "mamba_forward", "mamba_backward",
    "scan_sequential", "scan_parallel",
    "random_params", "random_contracting_params",
    "LyapunovEstimate", "DivergenceTrace", "PrecisionDivergence", "Perturb",
    "lyapunov_closed_form", "lyapunov_numeric",
    "divergence_probe", "precision_divergence", "fit_deviation_rate",
    "LoraAdapter", "TargetStrategy", "TyingReport",
    "attach_lora", "merged_weight", "select_targets", "verify_tying",
    "trainable_param_count", "save_adapters", "load_adapters",
    "CheckpointError", "save_tensors", "load_tensors", "save_checkpoint", "load_checkpoint",
    "BatchStream", "gen_selective_copy", "load_text_corpus",
    "ToyModel", "init_toy_model", "save_model", "load_model",
    "PrecisionPolicy", "TrainConfig", "TrainMetrics",
    "policy_preset", "train_loop", "evaluate",
    "MemoryMeter", "memory_meter", "reset_memory_meter", "tracked",
]
