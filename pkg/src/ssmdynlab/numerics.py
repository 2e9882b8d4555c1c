"""Reduced-precision emulation on an FP64 carrier, plus stable activations.

Everything downstream (scans, training, probes) computes in float64 and models
narrower formats by snapping values onto the target format's value grid after
each operation: quantize inputs, compute in FP64, quantize the result. That
keeps the arithmetic deterministic and makes "the same run in BF16" a
well-defined object of study instead of a hardware accident.

``quantize`` is a correct round-to-nearest-even conversion from the float64
value itself (not via an intermediate float32, which double-rounds on tie
windows): mantissa rounding happens in integer space on the float64 bit
pattern, with subnormals, signed zero, NaN propagation, and overflow to
signed infinity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import memory

__all__ = [
    "NumericFormat",
    "Tensor",
    "quantize",
    "softplus",
    "sigmoid",
    "silu",
    "diag_product_specnorm",
]


class NumericFormat(enum.Enum):
    """Value grids the FP64 carrier can emulate."""

    FP64 = "fp64"
    FP32 = "fp32"
    BF16 = "bf16"
    FP16 = "fp16"

    @classmethod
    def parse(cls, name: str) -> "NumericFormat":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(f.value for f in cls)
            raise ValueError(f"unknown numeric format {name!r} (expected one of: {valid})") from None


@dataclass(frozen=True)
class _FormatSpec:
    mbits: int  # explicit mantissa bits
    ebits: int

    @property
    def bias(self) -> int:
        return (1 << (self.ebits - 1)) - 1

    @property
    def emin(self) -> int:  # smallest normal exponent
        return 1 - self.bias

    @property
    def emax(self) -> int:
        return self.bias

    @property
    def max_finite(self) -> float:
        return float((2.0 - 2.0 ** (-self.mbits)) * 2.0 ** self.emax)


_SPECS = {
    NumericFormat.FP16: _FormatSpec(mbits=10, ebits=5),
    NumericFormat.BF16: _FormatSpec(mbits=7, ebits=8),
    NumericFormat.FP32: _FormatSpec(mbits=23, ebits=8),
}

_F64_MANT_MASK = np.uint64(0x000FFFFFFFFFFFFF)
_F64_EXP_MASK = np.uint64(0x7FF)


def _quantize_array(x: np.ndarray, spec: _FormatSpec) -> np.ndarray:
    """Round float64 values to the (ebits, mbits) grid, RNE, vectorized."""
    bits = np.ascontiguousarray(x).view(np.uint64)
    expf = ((bits >> np.uint64(52)) & _F64_EXP_MASK).astype(np.int64)
    sign = np.where(np.signbit(x), -1.0, 1.0)

    nonfinite = expf == 0x7FF
    # float64 subnormals sit many octaves below any emulated grid: round to 0
    flushed = expf == 0
    normal = ~(nonfinite | flushed)

    e = expf - 1023
    # bits to drop: 52 - mbits in the normal range, more as we descend into
    # the target's subnormal range (fixed spacing 2^(emin - mbits))
    q = 52 - spec.mbits + np.maximum(0, spec.emin - e)
    q = np.clip(q, 1, 63).astype(np.uint64)
    sig = np.where(normal, bits & _F64_MANT_MASK | np.uint64(1 << 52), np.uint64(0))

    kept = sig >> q
    half = np.uint64(1) << (q - np.uint64(1))
    rem = sig & ((np.uint64(1) << q) - np.uint64(1))
    round_up = (rem > half) | ((rem == half) & ((kept & np.uint64(1)) == np.uint64(1)))
    kept = kept + round_up.astype(np.uint64)

    e_eff = np.maximum(e, spec.emin)
    with np.errstate(over="ignore"):  # overflow to inf is the intended saturation
        val = sign * np.ldexp(kept.astype(np.float64), e_eff - spec.mbits)
    val = np.where(np.abs(val) > spec.max_finite, sign * np.inf, val)
    return np.where(normal, val, np.where(nonfinite, x, sign * 0.0))


def quantize(x, fmt: NumericFormat):
    """Nearest value representable in ``fmt``, ties to even mantissa.

    FP64 is the identity. NaN propagates; infinities and signed zeros are
    preserved; overflow rounds to signed infinity. Scalars come back as
    Python floats, arrays as float64 arrays on the target grid.
    """
    if fmt is NumericFormat.FP64:
        return x
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    if scalar:
        arr = arr.reshape(1)
    if fmt is NumericFormat.FP32:
        # numpy's f8->f4 cast is a correctly rounded RNE conversion
        with np.errstate(over="ignore"):
            out = arr.astype(np.float32).astype(np.float64)
    else:
        out = _quantize_array(arr, _SPECS[fmt])
    return float(out[0]) if scalar else out


def softplus(x):
    """log(1 + exp(x)) with the overflow-safe branch above x = 30.

    Above the threshold exp(x) would dwarf the 1, so the identity
    softplus(x) = x + log1p(exp(-x)) is used instead; the correction term is
    below double rounding at the switch point, so the branch is seamless.
    """
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    if scalar:
        arr = arr.reshape(1)
    out = np.empty_like(arr)
    big = arr > 30.0
    out[big] = arr[big] + np.log1p(np.exp(-arr[big]))
    out[~big] = np.log1p(np.exp(arr[~big]))
    return float(out[0]) if scalar else out


def sigmoid(x):
    """Numerically stable logistic function."""
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    if scalar:
        arr = arr.reshape(1)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    return float(out[0]) if scalar else out


def silu(x):
    """x * sigmoid(x), the gate nonlinearity."""
    return x * sigmoid(x)


def silu_grad(x):
    """Derivative of silu: sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def diag_product_specnorm(diags) -> float:
    """Spectral norm of a product of diagonal matrices given as 1-D vectors.

    For diagonals the product is elementwise and the spectral norm is the max
    absolute entry; no dense matrices are formed.
    """
    mats = [np.asarray(d, dtype=np.float64) for d in diags]
    if not mats:
        raise ValueError("empty product: need at least one diagonal")
    length = mats[0].shape
    for i, m in enumerate(mats):
        if m.ndim != 1:
            raise ValueError(f"diagonal {i} is not a vector (shape {m.shape})")
        if m.shape != length:
            raise ValueError(f"diagonal {i} has length {m.shape[0]}, expected {length[0]}")
    prod = mats[0].copy()
    for m in mats[1:]:
        prod *= m
    return float(np.max(np.abs(prod)))


class Tensor:
    """FP64 carrier tagged with the format its values are snapped to.

    Construction quantizes the payload onto the tagged format's grid, so the
    invariant "every element is representable in fmt" holds by construction,
    and registers the buffer with the default memory meter.
    """

    __slots__ = ("data", "fmt", "__weakref__")

    def __init__(self, data, fmt: NumericFormat = NumericFormat.FP64, track: bool = True):
        arr = np.array(data, dtype=np.float64, copy=True)
        if fmt is not NumericFormat.FP64:
            arr = np.asarray(quantize(arr, fmt))
        self.data = arr
        self.fmt = fmt
        if track:
            memory.tracked(arr)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, fmt={self.fmt.value})"
