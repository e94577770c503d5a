"""Block quantization to MX formats.

A block of 32 values shares the scale ``2**e`` with
``e = floor(log2(max|x|)) - bias`` (clamped to the E8M0 range), and every
element is rounded to the nearest code of ``x / 2**e`` with ties going to the
even mantissa. Scaling is always done by exponent arithmetic (``ldexp``), so
no rounded scale ever enters the computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from micromix.errors import DomainError, ShapeError
from micromix.formats import (
    BLOCK_SIZE,
    E8M0_BIAS,
    E8M0_MAX_EXP,
    E8M0_MIN_EXP,
    E8M0Scale,
    MxFormat,
    get_format,
    scale_exponents,
)

__all__ = [
    "MxBlock",
    "MxTensor",
    "as_dense",
    "pad_columns",
    "block_scale",
    "block_scale_exponents",
    "encode_element",
    "encode_scaled",
    "decode_element",
    "decode_codes",
    "quantize_block",
    "dequantize_block",
    "quantize_tensor",
    "dequantize_tensor",
    "fake_quantize",
]


def as_dense(values, *, name: str = "tensor") -> np.ndarray:
    """Validate and convert to a 2-D, C-contiguous float32 array."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains NaN or Inf")
    return arr


def pad_columns(x: np.ndarray, multiple: int = BLOCK_SIZE) -> tuple[np.ndarray, int]:
    """Zero-pad columns up to a multiple of ``multiple``; returns (padded, n_pad)."""
    pad = (-x.shape[1]) % multiple
    if pad:
        x = np.concatenate([x, np.zeros((x.shape[0], pad), dtype=x.dtype)], axis=1)
    return x, pad


def _floor_log2(a: np.ndarray) -> np.ndarray:
    # frexp gives a = m * 2**ex with m in [0.5, 1), so floor(log2 a) = ex - 1 exactly
    _, ex = np.frexp(a)
    return ex.astype(np.int32) - 1


def block_scale_exponents(block_max: np.ndarray, fmt: MxFormat) -> np.ndarray:
    """Shared exponent for each block given its max magnitude (vectorised)."""
    block_max = np.asarray(block_max, dtype=np.float64)
    e = _floor_log2(block_max) - fmt.bias
    e = np.clip(e, E8M0_MIN_EXP, E8M0_MAX_EXP)
    return np.where(block_max == 0, E8M0_MIN_EXP, e).astype(np.int32)


def block_scale(values, fmt: MxFormat | str) -> E8M0Scale:
    """Shared E8M0 scale of one block of values."""
    fmt = get_format(fmt)
    arr = np.asarray(values, dtype=np.float32)
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    return E8M0Scale(int(block_scale_exponents(np.array(peak), fmt)))


def encode_scaled(y: np.ndarray, fmt: MxFormat) -> np.ndarray:
    """Round already-scaled values to element codes (RNE, saturating).

    ``y`` must be float64 holding exact scaled values.
    """
    y = np.asarray(y, dtype=np.float64)
    a = np.abs(y)
    binade = np.maximum(_floor_log2(np.where(a > 0, a, 1.0)), fmt.min_exponent)
    quantum = np.ldexp(1.0, binade - fmt.mantissa_bits)
    # a / quantum is exact (power-of-two divide); rint is ties-to-even, and the
    # parity of the integer multiple equals the parity of the mantissa field
    mag = np.rint(a / quantum) * quantum
    mag = np.minimum(mag, float(fmt.q_max))
    idx = np.searchsorted(fmt.positive_values, mag)
    codes = idx.astype(np.uint8)
    return np.where(np.signbit(y), codes | fmt.sign_mask, codes).astype(np.uint8)


def _scaled(values: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    # float32 input times a power of two is exact in float64
    return np.ldexp(np.asarray(values, dtype=np.float32).astype(np.float64), -np.asarray(exponents))


def encode_element(x: float, scale: E8M0Scale, fmt: MxFormat | str) -> int:
    """Code of the element nearest to ``x / scale``."""
    fmt = get_format(fmt)
    return int(encode_scaled(_scaled(np.array([x]), np.array([scale.exponent])), fmt)[0])


def decode_codes(codes: np.ndarray, exponents: np.ndarray, fmt: MxFormat) -> np.ndarray:
    """Vectorised decode: ``value(code) * 2**exponent`` in float32.

    Products beyond the float32 range (only reachable near scale 2**127)
    decode to +-inf.
    """
    vals = fmt.code_values_f32[np.asarray(codes, dtype=np.intp)]
    with np.errstate(over="ignore"):
        return np.ldexp(vals, np.asarray(exponents, dtype=np.int32)).astype(np.float32)


def decode_element(code: int, scale: E8M0Scale | int, fmt: MxFormat | str) -> float:
    """Dequantized value of one code. ``scale`` may be an :class:`E8M0Scale` or a raw byte."""
    fmt = get_format(fmt)
    if not isinstance(scale, E8M0Scale):
        scale = E8M0Scale.from_byte(int(scale))
    if not 0 <= code < fmt.n_codes:
        raise ValueError(f"code {code} out of range for {fmt.name}")
    return float(decode_codes(np.array([code]), np.array([scale.exponent]), fmt)[0])


@dataclass(frozen=True)
class MxBlock:
    """One scale and 32 element codes."""

    scale: E8M0Scale
    codes: np.ndarray  # uint8, shape (32,)

    def __post_init__(self):
        if self.codes.shape != (BLOCK_SIZE,):
            raise ShapeError(f"a block holds exactly {BLOCK_SIZE} codes, got {self.codes.shape}")

    def __eq__(self, other):
        if not isinstance(other, MxBlock):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.codes, other.codes)

    __hash__ = None


def quantize_block(values, fmt: MxFormat | str) -> MxBlock:
    fmt = get_format(fmt)
    arr = np.asarray(values, dtype=np.float32).reshape(-1)
    if arr.size != BLOCK_SIZE:
        raise ShapeError(f"quantize_block expects {BLOCK_SIZE} values, got {arr.size}")
    scale = block_scale(arr, fmt)
    codes = encode_scaled(_scaled(arr, scale.exponent), fmt)
    return MxBlock(scale, codes)


def dequantize_block(block: MxBlock, fmt: MxFormat | str) -> np.ndarray:
    fmt = get_format(fmt)
    return decode_codes(block.codes, np.full(BLOCK_SIZE, block.scale.exponent), fmt)


@dataclass(frozen=True, eq=False)
class MxTensor:
    """A 2-D tensor quantized along its columns in 32-wide blocks.

    ``codes`` has shape ``(rows, cols)`` and ``scales`` holds the biased E8M0
    bytes, shape ``(rows, cols // 32)``; blocks are numbered row-major.
    """

    fmt: MxFormat
    codes: np.ndarray
    scales: np.ndarray
    pad: int = 0  # zero columns appended at ingestion

    def __post_init__(self):
        rows, cols = self.codes.shape
        if cols % BLOCK_SIZE:
            raise ShapeError(f"MxTensor cols ({cols}) must be a multiple of {BLOCK_SIZE}")
        if self.scales.shape != (rows, cols // BLOCK_SIZE):
            raise ShapeError(f"scales shape {self.scales.shape} does not match codes {self.codes.shape}")

    @property
    def rows(self) -> int:
        return self.codes.shape[0]

    @property
    def cols(self) -> int:
        return self.codes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def num_blocks(self) -> int:
        return self.scales.size

    def block(self, index: int) -> MxBlock:
        """Block ``index`` in row-major block order."""
        per_row = self.cols // BLOCK_SIZE
        r, b = divmod(index, per_row)
        return MxBlock(
            E8M0Scale.from_byte(int(self.scales[r, b])),
            self.codes[r, b * BLOCK_SIZE : (b + 1) * BLOCK_SIZE].copy(),
        )

    def blocks(self):
        return [self.block(i) for i in range(self.num_blocks)]

    def __eq__(self, other):
        if not isinstance(other, MxTensor):
            return NotImplemented
        return (
            self.fmt == other.fmt
            and self.pad == other.pad
            and np.array_equal(self.codes, other.codes)
            and np.array_equal(self.scales, other.scales)
        )

    __hash__ = None


def quantize_tensor(t, fmt: MxFormat | str, *, pad: bool = True) -> MxTensor:
    """Block-quantize every row of ``t`` in 32-column groups.

    With ``pad=True`` columns are zero-padded to a multiple of 32 and the
    padding is recorded on the result; otherwise a ragged width is an error.
    """
    fmt = get_format(fmt)
    x = as_dense(t)
    n_pad = 0
    if x.shape[1] % BLOCK_SIZE:
        if not pad:
            raise ShapeError(f"cols ({x.shape[1]}) not a multiple of {BLOCK_SIZE} and padding disabled")
        x, n_pad = pad_columns(x)
    rows, cols = x.shape
    grouped = x.reshape(rows, cols // BLOCK_SIZE, BLOCK_SIZE)
    exps = block_scale_exponents(np.max(np.abs(grouped), axis=2, initial=0.0), fmt)
    codes = encode_scaled(_scaled(grouped, exps[:, :, None]), fmt).reshape(rows, cols)
    scales = (exps + E8M0_BIAS).astype(np.uint8)
    return MxTensor(fmt, codes, scales, n_pad)


def dequantize_tensor(q: MxTensor, *, strip_padding: bool = True) -> np.ndarray:
    exps = scale_exponents(q.scales)
    values = decode_codes(q.codes, np.repeat(exps, BLOCK_SIZE, axis=1), q.fmt)
    if strip_padding and q.pad:
        values = values[:, : q.cols - q.pad]
    return np.ascontiguousarray(values)


def fake_quantize(t, fmt: MxFormat | str) -> np.ndarray:
    """Quantize-then-dequantize, same shape as the input."""
    return dequantize_tensor(quantize_tensor(t, fmt))

