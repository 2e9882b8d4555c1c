"""Fine-tuning harness: AdamW with cosine annealing, precision policies,
and throughput/memory accounting.

Losses are next-token cross-entropy masked to non-padding target positions.
Throughput is reported as ATPS (tokens per second, padding counted) and
memory as MMPT (peak tracked bytes per mini-batch token).  peak_bytes is
the meter's growth over the run, so runs are comparable even when earlier
allocations are still alive.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .lora import TargetStrategy, adapter_grads, attach_lora, select_targets
from .memory import default_meter, reset_memory_meter, tracked, tracked_zeros
from .numerics import NumericFormat, quantize


@dataclass(frozen=True)
class PrecisionPolicy:
    activation_format: NumericFormat
    gradient_format: NumericFormat
    master_format: NumericFormat = NumericFormat.FP32

    def __post_init__(self):
        if self.master_format not in (NumericFormat.FP32, NumericFormat.FP64):
            raise ValueError(
                f"master format must be FP32 or FP64, got {self.master_format.name}"
            )


POLICY_PRESETS = {
    "fp64": PrecisionPolicy(NumericFormat.FP64, NumericFormat.FP64, NumericFormat.FP64),
    "fp32": PrecisionPolicy(NumericFormat.FP32, NumericFormat.FP32, NumericFormat.FP32),
    "bf16": PrecisionPolicy(NumericFormat.BF16, NumericFormat.BF16, NumericFormat.FP32),
    "fp16": PrecisionPolicy(NumericFormat.FP16, NumericFormat.FP16, NumericFormat.FP32),
}


def policy_preset(name: str) -> PrecisionPolicy:
    try:
        return POLICY_PRESETS[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown precision policy {name!r}") from None


# (learning rate, adapter rank) pairs scaled by model tier
SIZE_PRESETS = {
    "small": (1.0e-5, 8),
    "medium": (5.0e-5, 16),
    "large": (1.0e-6, 32),
    "xl": (5.0e-6, 64),
    "xxl": (5.0e-7, 128),
}


@dataclass
class TrainConfig:
    learning_rate: float
    total_steps: int
    batch_size: int
    max_seq_len: int
    lora_rank: int | None = None   # None means full fine-tuning
    lora_strategy: str = "sll"
    lora_scale: float = 1.0
    warmup_steps: int = 0
    clip_norm: float = 1.0
    epochs: int = 1
    seed: int = 0
    loss_scale: float = 1.0        # static scale; 1.0 disables scaling

    def __post_init__(self):
        if self.warmup_steps < 0 or self.warmup_steps > self.total_steps:
            raise ValueError(
                f"warmup_steps {self.warmup_steps} must lie in [0, total_steps={self.total_steps}]"
            )
        if self.batch_size < 1 or self.max_seq_len < 1:
            raise ValueError("batch_size and max_seq_len must be positive")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be positive")
        if self.lora_rank is not None and self.lora_rank < 1:
            raise ValueError("lora_rank must be a positive integer or None")


@dataclass
class TrainMetrics:
    loss_trace: list
    atps: float
    mmpt: float
    peak_bytes: int
    total_tokens: int
    wall_seconds: float
    step_rows: list = field(default_factory=list)  # (step, lr, loss, grad_norm)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to learning_rate, then cosine annealing down to 0."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    p = (step - cfg.warmup_steps) / span if span > 0 else 1.0
    p = min(max(p, 0.0), 1.0)
    return max(0.0, cfg.learning_rate * 0.5 * (1.0 + np.cos(np.pi * p)))


def init_adamw_state(params: dict) -> dict:
    return {
        "step": 0,
        "m": {name: tracked_zeros(p.shape) for name, p in params.items()},
        "v": {name: tracked_zeros(p.shape) for name, p in params.items()},
    }


def adamw_step(
    params: dict,
    grads: dict,
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
    master_format: NumericFormat = NumericFormat.FP64,
):
    """Decoupled-weight-decay Adam with bias correction, applied in place.

    Arithmetic runs on the FP64 carrier; parameters and moments are snapped
    to the master format's grid after each update.
    """

    def qm(v):
        return v if master_format is NumericFormat.FP64 else np.asarray(quantize(v, master_format))

    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in {name!r}")
        m = state["m"][name]
        v = state["v"][name]
        m[...] = qm(beta1 * m + (1.0 - beta1) * g)
        v[...] = qm(beta2 * v + (1.0 - beta2) * g * g)
        if lr == 0.0:
            continue  # null update must leave parameters bit-identical
        if weight_decay != 0.0:
            p[...] = qm(p * (1.0 - lr * weight_decay))
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        p[...] = qm(p - lr * update)
    return params, state


def clip_grad_norm(grads: dict, max_norm: float = 1.0):
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {name: g * scale for name, g in grads.items()}
    return grads, norm


def xent_and_grad(logits: np.ndarray, targets: np.ndarray, pad_id: int, loss_scale: float = 1.0):
    """Masked mean cross-entropy and its logits gradient.

    logits are (T, B, V); targets are (B, T) ids.  Positions whose target
    equals pad_id carry neither loss nor gradient.  Returns
    (loss, d_logits, n_valid); d_logits is scaled by loss_scale, the loss
    value is not.
    """
    logits = np.asarray(logits, dtype=np.float64)
    t_targets = np.asarray(targets).T
    mask = t_targets != pad_id
    n_valid = int(mask.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(logits), 0
    z = logits - logits.max(axis=-1, keepdims=True)
    expz = np.exp(z)
    sumexp = expz.sum(axis=-1)
    lse = np.log(sumexp)
    picked = np.take_along_axis(z, t_targets[..., None], axis=-1)[..., 0]
    loss = float((lse - picked)[mask].sum() / n_valid)
    d_logits = expz / sumexp[..., None]
    rows = np.zeros_like(d_logits)
    np.put_along_axis(rows, t_targets[..., None], 1.0, axis=-1)
    d_logits = (d_logits - rows) * mask[..., None] * (loss_scale / n_valid)
    return loss, d_logits, n_valid


def batch_accuracy(logits: np.ndarray, targets: np.ndarray, pad_id: int):
    """(correct, total) over non-padding target positions."""
    t_targets = np.asarray(targets).T
    mask = t_targets != pad_id
    preds = np.asarray(logits).argmax(axis=-1)
    correct = int(np.logical_and(preds == t_targets, mask).sum())
    return correct, int(mask.sum())


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    n_positions: int


def evaluate(model, stream, policy=None) -> EvalResult:
    """Masked loss and answer-position accuracy over a whole stream.

    With no valid positions at all the accuracy is vacuously 1.0 (any
    model emits padding perfectly).
    """
    total_loss = 0.0
    total_valid = 0
    total_correct = 0
    for inputs, targets in stream:
        logits, _ = model.forward(inputs, policy=policy)
        loss, _, n_valid = xent_and_grad(logits, targets, stream.pad_id)
        correct, total = batch_accuracy(logits, targets, stream.pad_id)
        total_loss += loss * n_valid
        total_valid += n_valid
        total_correct += correct
    if total_valid == 0:
        return EvalResult(loss=0.0, accuracy=1.0, n_positions=0)
    return EvalResult(
        loss=total_loss / total_valid,
        accuracy=total_correct / total_valid,
        n_positions=total_valid,
    )


def _cycle(stream):
    while True:
        yield from stream


def train_loop(model, cfg: TrainConfig, policy: PrecisionPolicy, data) -> TrainMetrics:
    """Run the fine-tuning recipe and return throughput/memory metrics.

    Full fine-tuning updates every model parameter; with cfg.lora_rank set,
    adapters are attached per cfg.lora_strategy, only their factors train,
    and the adapters stay on the model afterwards (model.adapters).
    """
    if len(data) == 0:
        raise ValueError("empty batch stream")
    reset_memory_meter()
    meter = default_meter()
    baseline = meter.live_bytes
    for p in model.parameters().values():
        tracked(p)

    adapters = None
    if cfg.lora_rank is None:
        master = dict(model.parameters())
    else:
        selection = select_targets(model, TargetStrategy.parse(cfg.lora_strategy))
        adapters = {}
        master = {}
        for i, name in enumerate(selection.targeted):
            adapter = attach_lora(
                model.roles[name], cfg.lora_rank, cfg.lora_scale, seed=cfg.seed + i
            )
            tracked(adapter.U)
            tracked(adapter.V)
            adapters[name] = adapter
            master[f"{name}.lora_U"] = adapter.U
            master[f"{name}.lora_V"] = adapter.V
        model.adapters = adapters

    state = init_adamw_state(master)
    total_steps = cfg.total_steps if cfg.total_steps > 0 else cfg.epochs * len(data)
    batches = _cycle(data)
    loss_trace = []
    step_rows = []
    total_tokens = 0
    t_start = time.perf_counter()
    for step in range(total_steps):
        inputs, targets = next(batches)
        logits, cache = model.forward(inputs, policy=policy)
        tracked(logits)
        tracked(cache["trace"].states)
        loss, d_logits, _ = xent_and_grad(logits, targets, data.pad_id, cfg.loss_scale)
        if not np.isfinite(loss):
            raise ValueError(f"non-finite loss at step {step}")
        grads = model.backward(cache, d_logits)
        for g in grads.values():
            tracked(g)
        if cfg.loss_scale != 1.0:
            grads = {name: g / cfg.loss_scale for name, g in grads.items()}
        if adapters is None:
            master_grads = grads
        else:
            master_grads = {}
            for name, adapter in adapters.items():
                d_u, d_v = adapter_grads(adapter, grads[name])
                master_grads[f"{name}.lora_U"] = d_u
                master_grads[f"{name}.lora_V"] = d_v
        master_grads, grad_norm = clip_grad_norm(master_grads, cfg.clip_norm)
        lr = cosine_lr(step, cfg)
        adamw_step(master, master_grads, state, lr, master_format=policy.master_format)
        loss_trace.append(loss)
        step_rows.append((step, lr, loss, grad_norm))
        total_tokens += int(inputs.size)
    wall_seconds = time.perf_counter() - t_start

    peak_bytes = meter.peak_bytes - baseline
    atps = total_tokens / wall_seconds if wall_seconds > 0 else float("inf")
    mmpt = peak_bytes / (cfg.batch_size * cfg.max_seq_len)
    return TrainMetrics(
        loss_trace=loss_trace,
        atps=atps,
        mmpt=mmpt,
        peak_bytes=peak_bytes,
        total_tokens=total_tokens,
        wall_seconds=wall_seconds,
        step_rows=step_rows,
    )
