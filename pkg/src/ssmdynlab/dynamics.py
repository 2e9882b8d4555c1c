"""Stability probes for the selective recurrence.

The state-to-state Jacobian of the diagonal recurrence is diag(a_t) with
a_t = exp(delta_bar_t * A), so the maximal Lyapunov exponent has a closed
form per dimension: A[j] times the mean realized step size. Because A is
strictly negative and step sizes are nonnegative, the exponent can never be
positive; the numeric estimator takes the same quantity through the actual
forward pass (log-domain accumulation, never a product of decays) so the two
routes can disagree only by floating-point error.

Divergence probes run the recurrence twice, nominal and perturbed, under one
precision policy and record the worst per-dimension gap at each step. The
perturbation matches the stability statement: epsilon added to every
component of the initial state and/or of the first input. Deviation per step
is the max-abs norm.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .ssm import MambaParams, _forward

__all__ = [
    "Perturb",
    "LyapunovEstimate",
    "DivergenceTrace",
    "PrecisionDivergence",
    "lyapunov_closed_form",
    "lyapunov_numeric",
    "realized_delta_bars",
    "divergence_probe",
    "precision_divergence",
    "fit_deviation_rate",
]


class Perturb(enum.Enum):
    X0 = "x0"
    INPUT = "input"
    BOTH = "both"

    @classmethod
    def parse(cls, name: str) -> "Perturb":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown perturbation target {name!r}") from None


@dataclass
class LyapunovEstimate:
    per_dim: np.ndarray
    lambda_max: float
    t_used: int
    zeta_fit: float | None = None


@dataclass
class DivergenceTrace:
    deviations: np.ndarray  # entry i is the max-abs state gap at step i+1
    epsilon: float
    perturb: Perturb
    overflowed: bool


@dataclass
class PrecisionDivergence:
    """Output gap between a policy-quantized run and the FP64 run."""

    deviations: np.ndarray
    policy_name: str
    overflowed: bool

    @property
    def mean_divergence(self) -> float:
        finite = self.deviations[np.isfinite(self.deviations)]
        return float(finite.mean()) if finite.size else float("inf")


def lyapunov_closed_form(a_log, delta_bars) -> LyapunovEstimate:
    """per_dim[j] = A[j] * mean_t delta_bar_t[j] with A = -exp(a_log)."""
    a_log = np.asarray(a_log, dtype=np.float64)
    delta_bars = np.asarray(delta_bars, dtype=np.float64)
    if delta_bars.ndim != 2 or delta_bars.shape[1] != a_log.shape[0]:
        raise ValueError(
            f"delta_bars shape {delta_bars.shape} does not match d={a_log.shape[0]}"
        )
    if delta_bars.shape[0] == 0:
        raise ValueError("no steps: delta_bars is empty")
    if np.any(delta_bars < 0):
        raise ValueError("negative delta_bar: step sizes must be nonnegative")
    per_dim = -np.exp(a_log) * delta_bars.mean(axis=0)
    return LyapunovEstimate(per_dim=per_dim, lambda_max=float(per_dim.max()),
                            t_used=delta_bars.shape[0])


def realized_delta_bars(params: MambaParams, u, x0=None) -> np.ndarray:
    """The (T, d) step sizes the forward pass actually uses for these inputs."""
    cache = _forward(params, np.asarray(u, dtype=np.float64), x0, None).cache
    delta_bar = cache["delta_bar"]
    return np.broadcast_to(delta_bar, cache["states"].shape).astype(np.float64)


def lyapunov_numeric(params: MambaParams, u, x0=None) -> LyapunovEstimate:
    """Estimate through the forward pass: mean log of the realized decays.

    Accumulates log a_t[j] per step (log-domain; forming the product of T
    decays would underflow long before T gets interesting). Where a decay
    underflows FP64 to exact zero, the identity log a = delta_bar * A
    supplies the value the materialized decay lost.
    """
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2:
        raise ValueError(f"expected (T, d) inputs, got shape {u.shape}")
    if u.shape[0] == 0:
        raise ValueError("no steps: inputs are empty")
    cache = _forward(params, u, x0, None).cache
    decay = np.broadcast_to(cache["decay"], (u.shape[0], params.d))
    exact_log = np.broadcast_to(cache["delta_bar"] * cache["a_cont"], decay.shape)
    with np.errstate(divide="ignore"):
        log_decay = np.where(decay > 0.0, np.log(np.maximum(decay, 1e-320)), exact_log)
    per_dim = log_decay.mean(axis=0)
    return LyapunovEstimate(per_dim=per_dim, lambda_max=float(per_dim.max()),
                            t_used=u.shape[0])


def divergence_probe(params: MambaParams, u, epsilon: float,
                     perturb: Perturb = Perturb.BOTH, policy=None,
                     x0=None) -> DivergenceTrace:
    """Run nominal and perturbed trajectories under one policy.

    The perturbed run adds epsilon to every component of x0, of the first
    input u_1, or both. Returns the max-abs state gap per step; overflowed is
    set when either trajectory leaves the finite range (possible under FP16).
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] == 0:
        raise ValueError(f"expected nonempty (T, d) inputs, got shape {u.shape}")
    d = u.shape[1]
    if x0 is None:
        x0 = np.zeros(d, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)

    u_pert = u.copy()
    x0_pert = x0.copy()
    if perturb in (Perturb.INPUT, Perturb.BOTH):
        u_pert[0] = u_pert[0] + epsilon
    if perturb in (Perturb.X0, Perturb.BOTH):
        x0_pert = x0_pert + epsilon

    nominal = _forward(params, u, x0, policy).states
    perturbed = _forward(params, u_pert, x0_pert, policy).states
    overflowed = not (np.all(np.isfinite(nominal)) and np.all(np.isfinite(perturbed)))
    with np.errstate(invalid="ignore"):
        deviations = np.max(np.abs(nominal - perturbed), axis=-1)
    return DivergenceTrace(deviations=deviations, epsilon=float(epsilon),
                           perturb=perturb, overflowed=overflowed)


def precision_divergence(params: MambaParams, u, policy, x0=None) -> PrecisionDivergence:
    """Max-abs output gap per step between a policy run and the FP64 run."""
    u = np.asarray(u, dtype=np.float64)
    exact = _forward(params, u, x0, None).outputs
    reduced = _forward(params, u, x0, policy).outputs
    overflowed = not np.all(np.isfinite(reduced))
    with np.errstate(invalid="ignore"):
        deviations = np.max(np.abs(exact - reduced), axis=-1)
    name = getattr(getattr(policy, "activation_format", None), "value", "fp64")
    return PrecisionDivergence(deviations=deviations, policy_name=name,
                               overflowed=overflowed)


def fit_deviation_rate(trace) -> float:
    """OLS slope of log(deviations) against step index, in nats per step.

    Steps with zero, negative, or non-finite deviation carry no signal and
    are dropped; fewer than 8 usable steps is an error rather than a fit.
    """
    dev = np.asarray(trace.deviations, dtype=np.float64)
    t = np.arange(1, dev.shape[0] + 1, dtype=np.float64)
    usable = np.isfinite(dev) & (dev > 0.0)
    if int(usable.sum()) < 8:
        raise ValueError(
            f"insufficient signal: {int(usable.sum())} usable deviation steps, need >= 8"
        )
    x = t[usable]
    y = np.log(dev[usable])
    x_c = x - x.mean()
    return float(np.dot(x_c, y - y.mean()) / np.dot(x_c, x_c))
