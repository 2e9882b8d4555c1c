"""A small sequence model wrapping one selective recurrence block.

Layout: token embedding, input projection, the recurrence, and a linear
head over the vocabulary.  Weight roles are exposed by name so adapter
targeting and optimizers can address them uniformly.  When adapters are
attached, every forward pass runs on freshly merged copies and the base
arrays are never written.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import CheckpointError, load_tensors, save_tensors
from .lora import merged_weight
from .memory import tracked
from .numerics import NumericFormat, quantize
from .ssm import BufferMode, FusedBuffer, MambaParams, _forward, _policy_formats, mamba_backward

MATRIX_ROLES = ("embeddings", "in_proj", "out_proj", "gate", "fused_buffer")
VECTOR_PARAMS = ("a_log", "delta_bias")


@dataclass
class ToyModel:
    embeddings: np.ndarray      # (V, d)
    in_proj: np.ndarray         # (d, d)
    out_proj: np.ndarray        # (d, V)
    block: MambaParams
    vocab_size: int
    adapters: dict | None = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.block.d

    @property
    def mode(self) -> BufferMode:
        return self.block.fused.mode

    @property
    def roles(self) -> dict:
        roles = {
            "embeddings": self.embeddings,
            "in_proj": self.in_proj,
            "out_proj": self.out_proj,
            "fused_buffer": self.block.fused.weight,
        }
        if self.block.gate_enabled:
            roles["gate"] = self.block.gate_weight
        return roles

    def parameters(self) -> dict:
        params = dict(self.roles)
        params["a_log"] = self.block.a_log
        params["delta_bias"] = self.block.delta_bias
        return params

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        if name == "embeddings":
            self.embeddings = value
        elif name == "in_proj":
            self.in_proj = value
        elif name == "out_proj":
            self.out_proj = value
        elif name == "gate":
            self.block.gate_weight = value
        elif name == "fused_buffer":
            self.block.fused.weight = value
        elif name == "a_log":
            self.block.a_log = value
        elif name == "delta_bias":
            self.block.delta_bias = value
        else:
            raise KeyError(f"unknown parameter {name!r}")

    def effective_weights(self, adapters=None) -> dict:
        """Role name -> weight actually used in the forward pass."""
        adapters = self.adapters if adapters is None else adapters
        weights = dict(self.roles)
        if adapters:
            for name, adapter in adapters.items():
                if name not in weights:
                    raise KeyError(f"adapter targets unknown role {name!r}")
                weights[name] = tracked(merged_weight(adapter))
        return weights

    def forward(self, tokens: np.ndarray, policy=None, adapters=None):
        """Map (B, T) token ids to (T, B, V) logits; returns (logits, cache)."""
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"expected (B, T) token ids, got shape {tokens.shape}")
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            raise ValueError("token id out of range")
        act, _ = _policy_formats(policy)

        def q(v):
            return v if act is NumericFormat.FP64 else np.asarray(quantize(v, act))

        weights = self.effective_weights(adapters)
        block_eff = MambaParams(
            a_log=self.block.a_log,
            fused=FusedBuffer(mode=self.mode, weight=weights["fused_buffer"]),
            delta_bias=self.block.delta_bias,
            gate_enabled=self.block.gate_enabled,
            gate_weight=weights.get("gate"),
        )
        emb = q(weights["embeddings"][tokens])          # (B, T, d)
        emb_t = np.swapaxes(emb, 0, 1)                  # (T, B, d)
        u_in = q(emb_t @ weights["in_proj"].T)
        trace = _forward(block_eff, u_in, None, policy)
        logits = q(trace.outputs @ weights["out_proj"])
        cache = {
            "tokens": tokens,
            "emb_t": emb_t,
            "u_in": u_in,
            "trace": trace,
            "weights": weights,
            "block_eff": block_eff,
            "policy": policy,
        }
        return logits, cache

    def backward(self, cache: dict, d_logits: np.ndarray) -> dict:
        """Gradients of a scalar loss wrt every parameter, keyed by name.

        Gradients are taken at the effective (merged) weights; mapping a
        merged-weight gradient onto adapter factors is the caller's job.
        """
        _, gfmt = _policy_formats(cache["policy"])

        def q(v):
            return v if gfmt is NumericFormat.FP64 else np.asarray(quantize(v, gfmt))

        trace = cache["trace"]
        weights = cache["weights"]
        d_logits = np.asarray(d_logits, dtype=np.float64)
        d_out_proj = q(np.einsum("tbd,tbv->dv", trace.outputs, d_logits))
        d_outputs = q(d_logits @ weights["out_proj"].T)
        block_grads = mamba_backward(cache["block_eff"], trace, d_outputs)
        d_u = block_grads["inputs"]
        d_in_proj = q(np.einsum("tbi,tbj->ij", d_u, cache["emb_t"]))
        d_emb_t = q(d_u @ weights["in_proj"])
        d_embeddings = np.zeros_like(self.embeddings)
        flat_tokens = np.swapaxes(cache["tokens"], 0, 1).reshape(-1)
        np.add.at(d_embeddings, flat_tokens, d_emb_t.reshape(-1, self.d))
        grads = {
            "embeddings": q(d_embeddings),
            "in_proj": d_in_proj,
            "out_proj": d_out_proj,
            "fused_buffer": block_grads["fused"],
            "a_log": block_grads["a_log"],
            "delta_bias": block_grads["delta_bias"],
        }
        if self.block.gate_enabled:
            grads["gate"] = block_grads["gate_weight"]
        return grads


def init_toy_model(
    seed: int,
    d: int = 64,
    vocab: int = 16,
    mode: BufferMode = BufferMode.INPUT_PROJECTED,
    t_max: int = 64,
    gated: bool = True,
) -> ToyModel:
    """Deterministic initialization; the recurrence starts contracting."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    if mode is BufferMode.INPUT_PROJECTED:
        w = rng.normal(0.0, scale, size=(d, 3 * d))
    else:
        w = rng.normal(0.0, scale, size=(t_max, 3 * d))
    # slow state decay at init so early training can exploit long retention
    block = MambaParams(
        a_log=np.log(rng.uniform(0.02, 0.1, size=d)),
        fused=FusedBuffer(mode=mode, weight=w),
        delta_bias=np.full(d, 0.25),
        gate_enabled=gated,
        gate_weight=rng.normal(0.0, scale, size=(d, d)) if gated else None,
    )
    return ToyModel(
        embeddings=rng.normal(0.0, 1.0, size=(vocab, d)) * scale,
        in_proj=np.eye(d) + rng.normal(0.0, 0.1 * scale, size=(d, d)),
        out_proj=rng.normal(0.0, 0.1 * scale, size=(d, vocab)),
        block=block,
        vocab_size=vocab,
    )


def save_model(model: ToyModel, path) -> None:
    tensors = {name: w for name, w in model.parameters().items() if w is not None}
    meta = {
        "kind": "toy_model",
        "mode": model.mode.value,
        "vocab_size": model.vocab_size,
        "gated": model.block.gate_enabled,
    }
    save_tensors(path, tensors, meta)


def load_model(path) -> ToyModel:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "toy_model":
        raise CheckpointError(f"not a model checkpoint: kind={meta.get('kind')!r}")
    gated = bool(meta["gated"])
    block = MambaParams(
        a_log=tensors["a_log"],
        fused=FusedBuffer(mode=BufferMode.parse(meta["mode"]), weight=tensors["fused_buffer"]),
        delta_bias=tensors["delta_bias"],
        gate_enabled=gated,
        gate_weight=tensors["gate"] if gated else None,
    )
    return ToyModel(
        embeddings=tensors["embeddings"],
        in_proj=tensors["in_proj"],
        out_proj=tensors["out_proj"],
        block=block,
        vocab_size=int(meta["vocab_size"]),
    )
