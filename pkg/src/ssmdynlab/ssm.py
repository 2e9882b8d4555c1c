"""Selective diagonal state-space recurrence and its scans.

The recurrence is x_t = a_t * x_{t-1} + b_t * u_t, y_t = c_t * x_t with all
per-step quantities diagonal, stored as length-d vectors and combined
elementwise. The continuous-time transition A is kept in log parameterization
(A = -exp(a_log)), which makes it strictly negative and the discretized decay
a_t = exp(delta_bar_t * A) land in (0, 1] for every positive step size.

Per-timestep step sizes, input gains, and output gains live together in one
fused weight buffer W with column blocks [delta | B | C], either indexed by
time (row t-1 serves step t) or produced from the input as w_t = u_t @ W.

Scans come in two semantically identical flavors: a plain sequential loop and
a chunked work-efficient parallel form built on the associative composition
(a1, b1) o (a2, b2) = (a1*a2, a2*b1 + b2), whose combine order is fixed so
results do not depend on how many workers process the chunks.

Reduced-precision runs thread a policy through every stage: inputs and each
stage output are snapped to the policy's activation grid, and the backward
pass mirrors this with the gradient grid (treating the rounding itself as
identity for differentiation, as mixed-precision training does).
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .numerics import NumericFormat, quantize, sigmoid, silu, silu_grad, softplus

__all__ = [
    "BufferMode",
    "FusedBuffer",
    "MambaParams",
    "ScanElement",
    "StateTrace",
    "discretize",
    "scan_sequential",
    "scan_parallel",
    "mamba_forward",
    "mamba_backward",
    "random_params",
    "random_contracting_params",
]


class BufferMode(enum.Enum):
    TIME_INDEXED = "time_indexed"
    INPUT_PROJECTED = "input_projected"

    @classmethod
    def parse(cls, name: str) -> "BufferMode":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown buffer mode {name!r}") from None


@dataclass
class FusedBuffer:
    """Fused per-step parameter buffer W with column blocks [delta | B | C].

    TIME_INDEXED: W has shape (t_max, 3d); row t-1 supplies step t.
    INPUT_PROJECTED: W has shape (d, 3d); step t uses w_t = u_t @ W.
    """

    mode: BufferMode
    weight: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError(f"fused buffer must be 2-D, got shape {self.weight.shape}")
        if self.weight.shape[1] % 3 != 0:
            raise ValueError(
                f"fused buffer column count {self.weight.shape[1]} not divisible by 3"
            )

    @property
    def d(self) -> int:
        return self.weight.shape[1] // 3

    def rows(self, u: np.ndarray, t: int) -> np.ndarray:
        """Per-step rows (t, ..., 3d) for a run of t steps with inputs u."""
        if self.mode is BufferMode.TIME_INDEXED:
            if t > self.weight.shape[0]:
                raise ValueError(
                    f"sequence length {t} exceeds buffer t_max {self.weight.shape[0]}"
                )
            rows = self.weight[:t]
            if u.ndim == 3:  # broadcast over batch axis
                rows = rows[:, None, :]
            return rows
        return u @ self.weight


@dataclass
class MambaParams:
    """Parameters of one selective recurrence block."""

    a_log: np.ndarray        # (d,); A = -exp(a_log) is strictly negative
    fused: FusedBuffer
    delta_bias: np.ndarray   # (d,), added to raw delta before softplus
    gate_enabled: bool = False
    gate_weight: np.ndarray | None = None  # (d, d), used only when gated

    def __post_init__(self):
        self.a_log = np.asarray(self.a_log, dtype=np.float64)
        self.delta_bias = np.asarray(self.delta_bias, dtype=np.float64)
        d = self.fused.d
        if self.a_log.shape != (d,):
            raise ValueError(f"a_log shape {self.a_log.shape} does not match d={d}")
        if self.delta_bias.shape != (d,):
            raise ValueError(f"delta_bias shape {self.delta_bias.shape} does not match d={d}")
        if self.gate_enabled:
            if self.gate_weight is None:
                raise ValueError("gate_enabled requires gate_weight")
            self.gate_weight = np.asarray(self.gate_weight, dtype=np.float64)
            if self.gate_weight.shape != (d, d):
                raise ValueError(f"gate_weight shape {self.gate_weight.shape}, expected ({d}, {d})")

    @property
    def d(self) -> int:
        return self.fused.d

    @property
    def t_max(self) -> int | None:
        if self.fused.mode is BufferMode.TIME_INDEXED:
            return self.fused.weight.shape[0]
        return None


@dataclass(frozen=True)
class ScanElement:
    """One step of the recurrence as an element of the scan monoid."""

    decay: np.ndarray
    drive: np.ndarray

    def compose(self, other: "ScanElement") -> "ScanElement":
        """self applied first, then other: (a1*a2, a2*b1 + b2)."""
        return ScanElement(
            self.decay * other.decay,
            other.decay * self.drive + other.drive,
        )

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.decay * x + self.drive


@dataclass
class StateTrace:
    """Recorded run of the recurrence (time-major arrays)."""

    inputs: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    x0: np.ndarray
    policy: object | None = None
    cache: dict | None = field(default=None, repr=False, compare=False)


# ---------------------------------------------------------------------------
# discretization


def discretize(params: MambaParams, delta_raw, b_diag):
    """Zero-order-hold discretization of the diagonal system.

    delta_bar = softplus(delta_raw + delta_bias) guarantees a positive step
    size; the decay is a = exp(delta_bar * A) and the input coefficient is
    b = (a - 1)/A * b_diag, both elementwise. Broadcasts over leading axes.
    """
    delta_raw = np.asarray(delta_raw, dtype=np.float64)
    b_diag = np.asarray(b_diag, dtype=np.float64)
    a_cont = -np.exp(params.a_log)
    delta_bar = softplus(delta_raw + params.delta_bias)
    decay = np.exp(delta_bar * a_cont)
    bcoef = (decay - 1.0) / a_cont * b_diag
    return decay, bcoef


# ---------------------------------------------------------------------------
# scans


def _policy_formats(policy) -> tuple[NumericFormat, NumericFormat]:
    if policy is None:
        return NumericFormat.FP64, NumericFormat.FP64
    return policy.activation_format, policy.gradient_format


def scan_sequential(decay, drive, x0=None, fmt: NumericFormat = NumericFormat.FP64):
    """Run the recurrence step by step; ground truth for the parallel form.

    decay/drive are time-major arrays (T, ..., d); x0 broadcasts against one
    step. With fmt narrower than FP64 every multiply/add result is snapped to
    that grid, emulating a low-precision recurrence.
    """
    decay = np.asarray(decay, dtype=np.float64)
    drive = np.asarray(drive, dtype=np.float64)
    if decay.shape != drive.shape:
        raise ValueError(f"decay shape {decay.shape} != drive shape {drive.shape}")
    t_len = decay.shape[0]
    if x0 is None:
        x0 = np.zeros(decay.shape[1:], dtype=np.float64)
    x = np.broadcast_to(np.asarray(x0, dtype=np.float64), decay.shape[1:]).astype(np.float64)
    states = np.empty_like(decay)
    if fmt is NumericFormat.FP64:
        for t in range(t_len):
            x = decay[t] * x + drive[t]
            states[t] = x
        return states
    x = np.asarray(quantize(x, fmt))
    qdecay = np.asarray(quantize(decay, fmt))
    qdrive = np.asarray(quantize(drive, fmt))
    for t in range(t_len):
        x = quantize(quantize(qdecay[t] * x, fmt) + qdrive[t], fmt)
        states[t] = x
    return states


def _chunk_summary(decay, drive, fmt):
    """Compose a chunk's elements left to right into one (a, b) aggregate."""
    agg_a = np.ones_like(decay[0])
    agg_b = np.zeros_like(drive[0])
    if fmt is NumericFormat.FP64:
        for t in range(decay.shape[0]):
            agg_a = agg_a * decay[t]
            agg_b = decay[t] * agg_b + drive[t]
    else:
        for t in range(decay.shape[0]):
            agg_a = np.asarray(quantize(agg_a * decay[t], fmt))
            agg_b = np.asarray(quantize(np.asarray(quantize(decay[t] * agg_b, fmt)) + drive[t], fmt))
    return agg_a, agg_b


def _blelloch_exclusive(agg_a, agg_b, fmt):
    """Exclusive prefixes of chunk aggregates via up-sweep/down-sweep.

    Pads to a power of two with the monoid identity (1, 0), which composes
    exactly in floating point, so padding never perturbs results.
    """
    m = agg_a.shape[0]
    size = 1 << max(m - 1, 0).bit_length()

    def q(v):
        return v if fmt is NumericFormat.FP64 else np.asarray(quantize(v, fmt))

    pa = np.ones((size,) + agg_a.shape[1:], dtype=np.float64)
    pb = np.zeros_like(pa)
    pa[:m] = agg_a
    pb[:m] = agg_b

    stride = 1
    while stride < size:
        left = np.arange(stride - 1, size, 2 * stride)
        right = left + stride
        pa_r = q(pa[left] * pa[right])
        pb_r = q(q(pa[right] * pb[left]) + pb[right])
        pa[right] = pa_r
        pb[right] = pb_r
        stride *= 2

    pa[size - 1] = 1.0
    pb[size - 1] = 0.0
    stride = size // 2
    while stride >= 1:
        left = np.arange(stride - 1, size, 2 * stride)
        right = left + stride
        ta = pa[left].copy()
        tb = pb[left].copy()
        pa[left] = pa[right]
        pb[left] = pb[right]
        pa[right] = q(pa[right] * ta)
        pb[right] = q(q(ta * pb[right]) + tb)
        stride //= 2
    return pa[:m], pb[:m]


def scan_parallel(decay, drive, x0=None, chunk: int = 64,
                  fmt: NumericFormat = NumericFormat.FP64, workers: int = 1):
    """Work-efficient chunked scan; same contract as scan_sequential.

    Chunks are summarized independently (up-sweep), exclusive prefixes of the
    summaries are composed in a fixed tree order (down-sweep), and each chunk
    is then replayed from its carried-in state. Chunk work may run on a
    thread pool; the combine order is identical for any worker count, so
    results are bit-for-bit reproducible.
    """
    decay = np.asarray(decay, dtype=np.float64)
    drive = np.asarray(drive, dtype=np.float64)
    if decay.shape != drive.shape:
        raise ValueError(f"decay shape {decay.shape} != drive shape {drive.shape}")
    if chunk < 1:
        raise ValueError(f"chunk must be >= 1, got {chunk}")
    t_len = decay.shape[0]
    if x0 is None:
        x0 = np.zeros(decay.shape[1:], dtype=np.float64)
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), decay.shape[1:]).astype(np.float64)
    if t_len == 0:
        return np.empty_like(decay)
    if fmt is not NumericFormat.FP64:
        decay = np.asarray(quantize(decay, fmt))
        drive = np.asarray(quantize(drive, fmt))
        x0 = np.asarray(quantize(x0, fmt))

    bounds = [(s, min(s + chunk, t_len)) for s in range(0, t_len, chunk)]

    def summarize(span):
        lo, hi = span
        return _chunk_summary(decay[lo:hi], drive[lo:hi], fmt)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(summarize, bounds))
    else:
        summaries = [summarize(b) for b in bounds]

    agg_a = np.stack([s[0] for s in summaries])
    agg_b = np.stack([s[1] for s in summaries])
    pre_a, pre_b = _blelloch_exclusive(agg_a, agg_b, fmt)

    # carry into chunk c: exclusive prefix applied to x0
    if fmt is NumericFormat.FP64:
        carries = pre_a * x0 + pre_b
    else:
        carries = np.asarray(
            quantize(np.asarray(quantize(pre_a * x0, fmt)) + pre_b, fmt)
        )

    states = np.empty_like(decay)

    def replay(idx):
        lo, hi = bounds[idx]
        states[lo:hi] = scan_sequential(decay[lo:hi], drive[lo:hi], carries[idx], fmt=fmt)

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(replay, range(len(bounds))))
    else:
        for i in range(len(bounds)):
            replay(i)
    return states


# ---------------------------------------------------------------------------
# forward / backward


def _split_rows(rows, d):
    return rows[..., :d], rows[..., d : 2 * d], rows[..., 2 * d : 3 * d]


def _forward(params: MambaParams, u: np.ndarray, x0, policy):
    """Shared forward over (T, d) or (T, B, d) inputs; returns trace + cache."""
    act, _ = _policy_formats(policy)

    def q(v):
        return v if act is NumericFormat.FP64 else np.asarray(quantize(v, act))

    u = np.asarray(u, dtype=np.float64)
    d = params.d
    if u.shape[-1] != d:
        raise ValueError(f"input feature dim {u.shape[-1]} does not match d={d}")
    if not np.all(np.isfinite(u)):
        raise ValueError("non-finite values in inputs")
    t_len = u.shape[0]
    state_shape = u.shape[1:]
    if x0 is None:
        x0 = np.zeros(state_shape, dtype=np.float64)
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), state_shape).astype(np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("non-finite values in x0")

    u_q = q(u)
    if params.gate_enabled:
        z_gate = q(u_q @ params.gate_weight.T)
        gate = q(silu(z_gate))
        u_eff = q(gate * u_q)
    else:
        z_gate = None
        gate = None
        u_eff = u_q

    rows = q(params.fused.rows(u_q, t_len))
    delta_raw, b_diag, c_diag = _split_rows(rows, d)

    a_cont = q(-np.exp(params.a_log))
    z_delta = delta_raw + params.delta_bias
    delta_bar = q(softplus(z_delta))
    decay = q(np.exp(delta_bar * a_cont))
    bcoef = q((decay - 1.0) / a_cont * b_diag)
    drive = q(bcoef * u_eff)

    states = scan_sequential(decay * np.ones_like(u_eff), drive, x0, fmt=act)
    outputs = q(c_diag * states)

    cache = {
        "u_q": u_q, "z_gate": z_gate, "gate": gate, "u_eff": u_eff,
        "rows": rows, "delta_raw": delta_raw, "b_diag": b_diag, "c_diag": c_diag,
        "a_cont": a_cont, "z_delta": z_delta, "delta_bar": delta_bar,
        "decay": decay, "bcoef": bcoef, "drive": drive, "states": states, "x0": x0,
    }
    trace = StateTrace(inputs=u, states=states, outputs=outputs, x0=x0,
                       policy=policy, cache=cache)
    return trace


def mamba_forward(params: MambaParams, u, x0=None, policy=None) -> StateTrace:
    """Run the gated selective recurrence over a (T, d) input sequence."""
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"expected (T, d) inputs, got shape {u.shape}")
    return _forward(params, u, x0, policy)


def _backward(params: MambaParams, trace: StateTrace, d_outputs: np.ndarray):
    """Reverse-mode gradients; recomputes intermediates if the cache is gone."""
    cache = trace.cache
    if cache is None:
        cache = _forward(params, trace.inputs, trace.x0, trace.policy).cache
    _, gfmt = _policy_formats(trace.policy)

    def q(v):
        return v if gfmt is NumericFormat.FP64 else np.asarray(quantize(v, gfmt))

    d = params.d
    d_outputs = np.asarray(d_outputs, dtype=np.float64)
    states = cache["states"]
    decay = cache["decay"]
    u_q = cache["u_q"]
    u_eff = cache["u_eff"]
    t_len = states.shape[0]
    time_indexed = params.fused.mode is BufferMode.TIME_INDEXED

    d_c = q(d_outputs * states)
    d_states = q(d_outputs * cache["c_diag"])

    # reverse sweep over the recurrence x_t = a_t x_{t-1} + b_t
    decay_full = decay * np.ones_like(states)
    g_all = np.empty_like(states)
    carry = np.zeros(states.shape[1:], dtype=np.float64)
    if gfmt is NumericFormat.FP64:
        for t in range(t_len - 1, -1, -1):
            g = d_states[t] + carry
            g_all[t] = g
            carry = g * decay_full[t]
    else:
        for t in range(t_len - 1, -1, -1):
            g = quantize(d_states[t] + carry, gfmt)
            g_all[t] = g
            carry = np.asarray(quantize(g * decay_full[t], gfmt))
    d_x0 = carry

    prev = np.concatenate([cache["x0"][None], states[:-1]], axis=0)
    d_decay = q(g_all * prev)
    d_drive = g_all

    d_bcoef = q(d_drive * u_eff)
    d_ueff = q(d_drive * cache["bcoef"])

    a_cont = cache["a_cont"]
    bcoef_per_b = (decay - 1.0) / a_cont  # d(bcoef)/d(b_diag)
    d_b = q(d_bcoef * bcoef_per_b)
    d_decay = q(d_decay + d_bcoef * cache["b_diag"] / a_cont)
    d_a_from_bcoef = q(-d_bcoef * cache["b_diag"] * (decay - 1.0) / a_cont**2)

    d_delta_bar = q(d_decay * decay * a_cont)
    d_a_cont = d_a_from_bcoef + q(d_decay * decay * cache["delta_bar"])

    d_z_delta = q(d_delta_bar * sigmoid(cache["z_delta"]))
    d_delta_raw = d_z_delta

    d_rows = np.concatenate([d_delta_raw, d_b, d_c], axis=-1)

    d_u = np.zeros_like(u_q)
    if time_indexed:
        d_w = np.zeros_like(params.fused.weight)
        reduced = d_rows
        if reduced.ndim == 3:  # sum over batch axis
            reduced = reduced.sum(axis=1)
        # rows past t_len are exact zeros and every grid maps 0 to 0, so
        # only the touched block needs to pass through the quantizer
        d_w[:t_len] = q(reduced)
    else:
        if d_rows.ndim == 3:
            d_w = q(np.einsum("tbi,tbj->ij", u_q, d_rows))
        else:
            d_w = q(np.einsum("ti,tj->ij", u_q, d_rows))
        d_u = d_u + d_rows @ params.fused.weight.T

    if params.gate_enabled:
        gate = cache["gate"]
        d_u = d_u + q(d_ueff * gate)
        d_gate = q(d_ueff * u_q)
        d_z_gate = q(d_gate * silu_grad(cache["z_gate"]))
        if d_z_gate.ndim == 3:
            d_gate_w = q(np.einsum("tbi,tbj->ij", d_z_gate, u_q))
        else:
            d_gate_w = q(np.einsum("ti,tj->ij", d_z_gate, u_q))
        d_u = d_u + d_z_gate @ params.gate_weight
    else:
        d_gate_w = None
        d_u = d_u + d_ueff

    d_u = q(d_u)

    # reduce per-step parameter grads over time (and batch) axes
    reduce_axes = tuple(range(d_z_delta.ndim - 1))
    d_delta_bias = d_z_delta.sum(axis=reduce_axes)
    d_a_total = d_a_cont.sum(axis=reduce_axes)
    d_a_log = d_a_total * a_cont  # dA/da_log = -exp(a_log) = A

    grads = {
        "a_log": np.asarray(q(d_a_log)),
        "fused": np.asarray(d_w),   # both branches quantized at construction
        "delta_bias": np.asarray(q(d_delta_bias)),
        "x0": np.asarray(q(d_x0)),
        "inputs": d_u,
    }
    if params.gate_enabled:
        grads["gate_weight"] = d_gate_w
    return grads


def mamba_backward(params: MambaParams, trace: StateTrace, d_outputs) -> dict:
    """Gradients of sum(d_outputs * outputs) w.r.t. parameters, x0, inputs.

    The trace must come from mamba_forward on the same params; intermediates
    are replayed deterministically under the trace's recorded policy.
    """
    d_outputs = np.asarray(d_outputs, dtype=np.float64)
    if d_outputs.shape != trace.outputs.shape:
        raise ValueError(
            f"cotangent shape {d_outputs.shape} != outputs shape {trace.outputs.shape}"
        )
    return _backward(params, trace, d_outputs)


# ---------------------------------------------------------------------------
# random instances for tests, probes, and benches


def random_params(rng: np.random.Generator, d: int, t_max: int = 64,
                  mode: BufferMode = BufferMode.TIME_INDEXED,
                  gate_enabled: bool = False) -> MambaParams:
    """Standard random draw: a_log ~ N(0,1), fused rows ~ N(0,1)."""
    n_rows = t_max if mode is BufferMode.TIME_INDEXED else d
    fused = FusedBuffer(mode=mode, weight=rng.normal(size=(n_rows, 3 * d)))
    gate_w = rng.normal(size=(d, d)) / np.sqrt(d) if gate_enabled else None
    return MambaParams(
        a_log=rng.normal(size=d),
        fused=fused,
        delta_bias=0.1 * rng.normal(size=d),
        gate_enabled=gate_enabled,
        gate_weight=gate_w,
    )


def random_contracting_params(rng: np.random.Generator, d: int, t_max: int = 64) -> MambaParams:
    """Draw with every decay bounded away from 1 (a_t <= exp(-0.09) < 0.999).

    Time-indexed so the bound holds for any admissible input: delta columns
    are shifted positive (delta_bar >= softplus(0.5)) and |A| >= 0.1.
    """
    weight = rng.normal(size=(t_max, 3 * d))
    weight[:, :d] = np.abs(weight[:, :d]) + 0.5
    fused = FusedBuffer(mode=BufferMode.TIME_INDEXED, weight=weight)
    return MambaParams(
        a_log=np.maximum(rng.normal(size=d), np.log(0.1)),
        fused=fused,
        delta_bias=np.zeros(d),
        gate_enabled=False,
    )
