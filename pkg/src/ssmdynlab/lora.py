"""Low-rank adapters with the fused-buffer weight-tying construction.

An adapter keeps the base matrix frozen and learns two small factors U and
V whose product is the weight update.  When the adapted matrix is the fused
buffer, every row of the update is a combination of the same r left-factor
rows, so the delta/B/C column segments are adapted by one shared U.  The
verification routines here check exactly that property.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .checkpoint import CheckpointError, load_tensors, save_tensors

RESIDUAL_TOL = 1e-10
RANK_CUTOFF = 1e-10

SLL_ROLES = ("fused_buffer", "embeddings", "in_proj", "out_proj")
KNOWN_ROLES = frozenset(SLL_ROLES) | {"gate"}


class TargetStrategy(enum.Enum):
    ALL = "all"
    SLL = "sll"

    @classmethod
    def parse(cls, name: str) -> "TargetStrategy":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown target strategy {name!r}") from None


@dataclass
class LoraAdapter:
    """Frozen base plus trainable factors; merged weight is base + scale*U@V."""

    base: np.ndarray
    U: np.ndarray
    V: np.ndarray
    r: int
    scale: float = 1.0

    def delta(self) -> np.ndarray:
        return self.scale * (self.U @ self.V)


@dataclass
class TargetSelection:
    strategy: TargetStrategy
    targeted: tuple


@dataclass
class TyingReport:
    rank_observed: int
    segment_residuals: tuple
    shared_left_factor_ok: bool


def attach_lora(base: np.ndarray, r: int, scale: float = 1.0, seed: int = 0) -> LoraAdapter:
    """Create an adapter on ``base`` with U zeroed so the initial update is 0.

    V is drawn from a zero-mean Gaussian with std 1/sqrt(n_cols) using a
    generator seeded with ``seed``; the same seed always yields the same V.
    """
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 2:
        raise ValueError(f"adapter target must be a matrix, got {base.ndim}-d")
    n_rows, n_cols = base.shape
    if r < 1:
        raise ValueError(f"rank must be positive, got {r}")
    if r > min(n_rows, n_cols):
        raise ValueError(
            f"rank exceeds matrix: r={r} > min{(n_rows, n_cols)}"
        )
    rng = np.random.default_rng(seed)
    v = rng.normal(0.0, 1.0 / np.sqrt(n_cols), size=(r, n_cols))
    return LoraAdapter(
        base=base,
        U=np.zeros((n_rows, r)),
        V=v,
        r=int(r),
        scale=float(scale),
    )


def merged_weight(adapter: LoraAdapter) -> np.ndarray:
    # adding an all-zero update would still flip any -0.0 in base to +0.0,
    # so the zero-U case (fresh adapter, or scale 0) short-circuits
    if adapter.scale == 0.0 or not np.any(adapter.U):
        return adapter.base.copy()
    return adapter.base + adapter.delta()


def adapter_grads(adapter: LoraAdapter, d_merged: np.ndarray):
    """Backprop a cotangent on the merged weight into (d_U, d_V)."""
    d_u = adapter.scale * (d_merged @ adapter.V.T)
    d_v = adapter.scale * (adapter.U.T @ d_merged)
    return d_u, d_v


def _numerical_rank(delta_w: np.ndarray) -> int:
    sigma = np.linalg.svd(delta_w, compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        return 0
    return int(np.count_nonzero(sigma > RANK_CUTOFF * sigma[0]))


def tying_report_from_delta(delta_w: np.ndarray, u: np.ndarray, d: int) -> TyingReport:
    """Check whether ``delta_w`` on a fused buffer is explained by left factor ``u``.

    Splits the columns into the delta/B/C segments of width ``d`` and solves
    least squares delta_w[:, seg] = u @ X per segment.  The Frobenius norm of
    each residual must fall below RESIDUAL_TOL for the shared-left-factor
    property to hold.
    """
    delta_w = np.asarray(delta_w, dtype=np.float64)
    if delta_w.ndim != 2 or delta_w.shape[1] % 3 != 0:
        raise ValueError(
            f"not a fused buffer: expected 3*d columns, got shape {delta_w.shape}"
        )
    if delta_w.shape[1] != 3 * d:
        raise ValueError(
            f"segment width {d} does not tile {delta_w.shape[1]} columns"
        )
    residuals = []
    for s in range(3):
        seg = delta_w[:, s * d : (s + 1) * d]
        if u.shape[1] == 0:
            fit = np.zeros_like(seg)
        else:
            x, *_ = np.linalg.lstsq(u, seg, rcond=None)
            fit = u @ x
        residuals.append(float(np.linalg.norm(fit - seg)))
    ok = all(res < RESIDUAL_TOL for res in residuals)
    return TyingReport(
        rank_observed=_numerical_rank(delta_w),
        segment_residuals=tuple(residuals),
        shared_left_factor_ok=ok,
    )


def verify_tying(adapter: LoraAdapter, d: int) -> TyingReport:
    return tying_report_from_delta(adapter.delta(), adapter.U, d)


def select_targets(model, strategy: TargetStrategy) -> TargetSelection:
    """Pick adapter targets among the model's named weight roles.

    ALL adapts every exposed matrix role.  SLL adapts the fused buffer (the
    tying target) together with the embedding and projection matrices.
    """
    roles = dict(model.roles)
    for name in roles:
        if name not in KNOWN_ROLES:
            raise ValueError(f"unknown weight role {name!r}")
    if strategy is TargetStrategy.ALL:
        targeted = tuple(sorted(roles))
    elif strategy is TargetStrategy.SLL:
        if "fused_buffer" not in roles:
            raise ValueError("missing x_proj role: model has no fused buffer")
        targeted = tuple(name for name in SLL_ROLES if name in roles)
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unknown target strategy {strategy!r}")
    return TargetSelection(strategy=strategy, targeted=targeted)


def trainable_param_count(model, selection: TargetSelection, r: int):
    """Return (trainable, total) parameter counts for a rank-r adaptation."""
    roles = dict(model.roles)
    trainable = 0
    for name in selection.targeted:
        n_rows, n_cols = roles[name].shape
        trainable += r * (n_rows + n_cols)
    if hasattr(model, "parameters"):
        total = sum(int(p.size) for p in model.parameters().values())
    else:
        total = sum(int(w.size) for w in roles.values())
    return trainable, total


def save_adapters(path, adapters: dict) -> None:
    """Write adapters to one container; base and merged ride along so a
    verifier can recompute the update without the originating model."""
    if not adapters:
        raise ValueError("no adapters to save")
    ranks = {a.r for a in adapters.values()}
    scales = {a.scale for a in adapters.values()}
    if len(ranks) != 1 or len(scales) != 1:
        raise ValueError("adapters in one checkpoint must share r and scale")
    tensors = {}
    for name, adapter in adapters.items():
        tensors[f"{name}.base"] = adapter.base
        tensors[f"{name}.lora_U"] = adapter.U
        tensors[f"{name}.lora_V"] = adapter.V
        tensors[f"{name}.merged"] = merged_weight(adapter)
    meta = {"kind": "lora_adapters", "r": ranks.pop(), "scale": scales.pop()}
    save_tensors(path, tensors, meta)


def load_adapters(path):
    """Read adapters back; returns (adapters, merged_tensors, meta).

    The merged tensors are returned as stored rather than recomputed, so a
    doctored file can be caught by comparing them against base + scale*U@V.
    """
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "lora_adapters":
        raise CheckpointError(f"not an adapter checkpoint: kind={meta.get('kind')!r}")
    names = sorted({key.rsplit(".", 1)[0] for key in tensors})
    adapters = {}
    merged = {}
    for name in names:
        try:
            base = tensors[f"{name}.base"]
            u = tensors[f"{name}.lora_U"]
            v = tensors[f"{name}.lora_V"]
            merged[name] = tensors[f"{name}.merged"]
        except KeyError as exc:
            raise CheckpointError(f"adapter {name!r} is missing tensor {exc}") from None
        adapters[name] = LoraAdapter(
            base=base, U=u, V=v, r=int(meta["r"]), scale=float(meta["scale"])
        )
    return adapters, merged, meta
