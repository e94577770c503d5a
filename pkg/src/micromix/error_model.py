"""Quantization error formulas and outlier thresholds.

The MX error of one element is ``gamma * s`` where ``s`` is the block scale and
``gamma`` the rounding error in code units. Low-precision groups are kept
below the INT8 per-tensor error ceiling ``max|X| / 254``; solving that
inequality for the group maximum gives the threshold

    T(n) = 2**(b + n - 1) * max|X| / (254 * q_max)

for an n-bit format with exponent bias ``b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from micromix.errors import DomainError
from micromix.formats import FP4_E2M1, FP6_E3M2, MxFormat, get_format
from micromix.mx import MxBlock, block_scale_exponents, decode_element, encode_element

HIGH_PRECISION_BITS = 8


@dataclass(frozen=True)
class QuantError:
    gamma: float
    scale: float
    error: float


@dataclass(frozen=True)
class ThresholdSet:
    tensor_max: float
    t4: float
    t6: float
    int8_ceiling: float

    def as_dict(self) -> dict:
        return {"tensor_max": self.tensor_max, "t4": self.t4, "t6": self.t6, "int8_ceiling": self.int8_ceiling}


def _check_positive(tensor_max: float) -> float:
    tensor_max = float(tensor_max)
    if not tensor_max > 0 or not math.isfinite(tensor_max):
        raise DomainError(f"tensor_max must be finite and > 0, got {tensor_max}")
    return tensor_max


def quant_error(x: float, block: MxBlock, fmt: MxFormat | str) -> QuantError:
    """Rounding error of ``x`` inside ``block``, split into code units and scale."""
    fmt = get_format(fmt)
    x = float(np.float32(x))
    code = encode_element(x, block.scale, fmt)
    approx = decode_element(code, block.scale, fmt)
    # both terms are exact in float64, so these are exact
    gamma = abs(math.ldexp(x, -block.scale.exponent) - fmt.code_values[code])
    error = abs(x - approx)
    return QuantError(gamma=gamma, scale=block.scale.value, error=error)


def int_error_bound(tensor_max: float, n_bits: int) -> float:
    """Worst-case error of symmetric n-bit integer quantization: ``max / (2**n - 2)``."""
    tensor_max = _check_positive(tensor_max)
    if n_bits < 2:
        raise DomainError(f"n_bits must be >= 2, got {n_bits}")
    return tensor_max / (2**n_bits - 2)


def int_error_bound_qmax(tensor_max: float, q_max: int) -> float:
    """The same bound written in terms of the integer range: ``max / (2 * q_max)``."""
    tensor_max = _check_positive(tensor_max)
    if q_max < 1:
        raise DomainError(f"q_max must be >= 1, got {q_max}")
    return tensor_max / (2 * q_max)


def int_fake_quant(t, q_max: int) -> np.ndarray:
    """Per-channel symmetric integer fake quantization.

    Channels are columns. Each column is scaled by ``max|col| / q_max``,
    rounded half-to-even onto ``[-q_max, q_max]`` and scaled back. The
    arithmetic runs in float64 and the result keeps the input dtype.
    All-zero columns pass through unchanged.
    """
    if q_max != int(q_max) or q_max < 1:
        raise DomainError(f"q_max must be an integer >= 1, got {q_max}")
    q_max = int(q_max)
    arr = np.asarray(t)
    if arr.ndim == 1:
        arr = arr[:, None]
    dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float64
    x = arr.astype(np.float64)
    peak = np.max(np.abs(x), axis=0, keepdims=True)
    safe = np.where(peak > 0, peak, 1.0)
    # x * q / peak keeps one rounding before rint; scale back the same way
    levels = np.clip(np.rint(x * q_max / safe), -q_max, q_max)
    out = levels * safe / q_max
    out = np.where(peak > 0, out, x)
    return out.astype(dtype).reshape(np.shape(t))


def thresholds(tensor_max: float, high_bits: int = HIGH_PRECISION_BITS) -> ThresholdSet:
    """T(4) for E2M1 and T(6) for E3M2 against the ``high_bits`` integer ceiling."""
    tensor_max = _check_positive(tensor_max)
    denom = 2**high_bits - 2
    return ThresholdSet(
        tensor_max=tensor_max,
        t4=threshold(tensor_max, FP4_E2M1, 4, high_bits),
        t6=threshold(tensor_max, FP6_E3M2, 6, high_bits),
        int8_ceiling=tensor_max / denom,
    )


def threshold(tensor_max: float, fmt: MxFormat, n_bits: int, high_bits: int = HIGH_PRECISION_BITS) -> float:
    """Largest group maximum for which ``fmt`` stays under the integer ceiling."""
    tensor_max = _check_positive(tensor_max)
    denom = (2**high_bits - 2) * float(fmt.q_max)
    # scaling by 2**k is exact, so the result is the correctly rounded quotient
    return math.ldexp(tensor_max, fmt.bias + n_bits - 1) / denom


def fp_error_bound(tensor_max: float, fmt: MxFormat | str) -> float:
    """Approximate MX element error bound ``(q_max / 2**(n-1)) * max / 2**b``.

    Uses ``gamma ~= q_max / 2**(n-1)``; see :func:`exact_fp_error_bound` for
    the enumerated worst case.
    """
    fmt = get_format(fmt)
    tensor_max = _check_positive(tensor_max)
    gamma = float(fmt.q_max) / 2 ** (fmt.element_bits - 1)
    return gamma * math.ldexp(tensor_max, -fmt.bias)


def exact_fp_error_bound(block_max: float, fmt: MxFormat | str) -> float:
    """Exact worst-case rounding error for any element of a block with this max.

    Enumerates the code points covering ``[0, block_max / s]`` and takes the
    largest half-gap (clipped at the block max), plus the saturation distance
    when the scaled max lies beyond ``q_max``.
    """
    fmt = get_format(fmt)
    block_max = _check_positive(block_max)
    e = int(block_scale_exponents(np.array(block_max), fmt))
    ymax = math.ldexp(block_max, -e)
    vals = fmt.positive_values
    worst = 0.0
    for lo, hi in zip(vals[:-1], vals[1:]):
        if lo >= ymax:
            break
        worst = max(worst, min((hi - lo) / 2, ymax - lo))
    worst = max(worst, ymax - vals[-1])
    return math.ldexp(worst, e)

