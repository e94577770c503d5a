"""MX element formats, E8M0 scales and the element code tables.

Element codes are sign-magnitude: ``[sign | exponent field | mantissa field]``.
Positive codes are ordered so that increasing magnitude code means increasing
value, which lets encoders map a rounded magnitude back to its code with a
binary search over the positive value table.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from functools import cached_property

import numpy as np

from micromix.errors import FormatError, InvalidScaleError

BLOCK_SIZE = 32
SCALE_BITS = 8
E8M0_BIAS = 127
E8M0_MIN_EXP = -127
E8M0_MAX_EXP = 127
E8M0_NAN = 0xFF


class Special(enum.Enum):
    """How the top exponent field is interpreted."""

    NONE = "none"  # all codes finite (FP4, FP6)
    FN = "fn"  # only S.1111.111 is NaN (E4M3)
    IEEE = "ieee"  # top exponent is Inf/NaN (E5M2)


@dataclass(frozen=True)
class MxFormat:
    """Static descriptor of one MX element format."""

    name: str
    code: int  # on-disk format code
    exponent_bits: int
    mantissa_bits: int
    bias: int
    q_max: Fraction
    special: Special = Special.NONE
    block_size: int = BLOCK_SIZE
    scale_bits: int = SCALE_BITS

    @property
    def element_bits(self) -> int:
        return 1 + self.exponent_bits + self.mantissa_bits

    @property
    def n_codes(self) -> int:
        return 1 << self.element_bits

    @property
    def sign_mask(self) -> int:
        return 1 << (self.element_bits - 1)

    @property
    def min_exponent(self) -> int:
        """Unbiased exponent of the smallest normal binade (also used by subnormals)."""
        return 1 - self.bias

    def code_value(self, code: int) -> float:
        """Exact value of one code, NaN/Inf for the reserved encodings."""
        if not 0 <= code < self.n_codes:
            raise FormatError(f"code {code} out of range for {self.name}")
        sign = -1.0 if code & self.sign_mask else 1.0
        mag = code & (self.sign_mask - 1)
        exp_field = mag >> self.mantissa_bits
        man_field = mag & ((1 << self.mantissa_bits) - 1)
        top = (1 << self.exponent_bits) - 1
        if self.special is Special.IEEE and exp_field == top:
            return sign * float("inf") if man_field == 0 else float("nan")
        if self.special is Special.FN and exp_field == top and man_field == (1 << self.mantissa_bits) - 1:
            return float("nan")
        if exp_field == 0:
            value = man_field * 2.0 ** (self.min_exponent - self.mantissa_bits)
        else:
            value = (1.0 + man_field / (1 << self.mantissa_bits)) * 2.0 ** (exp_field - self.bias)
        return sign * value

    @cached_property
    def code_values(self) -> np.ndarray:
        """Decoded value of every code, indexed by code (float64)."""
        return np.array([self.code_value(c) for c in range(self.n_codes)], dtype=np.float64)

    @cached_property
    def code_values_f32(self) -> np.ndarray:
        return self.code_values.astype(np.float32)

    @cached_property
    def positive_values(self) -> np.ndarray:
        """Finite non-negative values in magnitude-code order (strictly increasing)."""
        vals = self.code_values[: self.sign_mask]
        finite = vals[np.isfinite(vals)]
        # finite magnitudes occupy a prefix of the magnitude codes
        assert np.all(np.isfinite(vals[: finite.size]))
        assert np.all(np.diff(finite) > 0)
        return finite

    @property
    def max_magnitude_code(self) -> int:
        return self.positive_values.size - 1

    def negate(self, code):
        """Flip the sign bit of one code or an array of codes."""
        return code ^ self.sign_mask

    def __str__(self) -> str:
        return self.name


FP4_E2M1 = MxFormat("E2M1", 0, 2, 1, 1, Fraction(6))
FP6_E3M2 = MxFormat("E3M2", 1, 3, 2, 3, Fraction(28))
FP6_E2M3 = MxFormat("E2M3", 2, 2, 3, 1, Fraction(15, 2))
FP8_E4M3 = MxFormat("E4M3", 3, 4, 3, 7, Fraction(448), Special.FN)
FP8_E5M2 = MxFormat("E5M2", 4, 5, 2, 15, Fraction(57344), Special.IEEE)

FORMATS: dict[str, MxFormat] = {f.name: f for f in (FP4_E2M1, FP6_E3M2, FP6_E2M3, FP8_E4M3, FP8_E5M2)}
_BY_CODE = {f.code: f for f in FORMATS.values()}

# MX family a format belongs to, as named in format tables
FAMILY = {"E2M1": "MXFP4", "E3M2": "MXFP6", "E2M3": "MXFP6", "E4M3": "MXFP8", "E5M2": "MXFP8"}

SIX_BIT_FORMATS = ("E3M2", "E2M3")
EIGHT_BIT_FORMATS = ("E4M3", "E5M2")


def get_format(name: str | MxFormat) -> MxFormat:
    """Look up a format by name; accepts ``E2M1``, ``FP4_E2M1`` or ``fp4_e2m1``."""
    if isinstance(name, MxFormat):
        return name
    key = str(name).upper()
    if "_" in key:
        key = key.split("_", 1)[1]
    try:
        return FORMATS[key]
    except KeyError:
        raise FormatError(f"unknown MX element format {name!r}; expected one of {sorted(FORMATS)}") from None


def format_from_code(code: int) -> MxFormat:
    try:
        return _BY_CODE[code]
    except KeyError:
        raise FormatError(f"unknown format code {code}") from None


@dataclass(frozen=True)
class E8M0Scale:
    """Power-of-two block scale ``2**exponent``, stored as ``exponent + 127``."""

    exponent: int

    def __post_init__(self):
        if not E8M0_MIN_EXP <= self.exponent <= E8M0_MAX_EXP:
            raise InvalidScaleError(f"E8M0 exponent {self.exponent} outside [-127, 127]")

    @property
    def byte(self) -> int:
        return self.exponent + E8M0_BIAS

    @property
    def value(self) -> float:
        return 2.0**self.exponent

    @classmethod
    def from_byte(cls, byte: int) -> E8M0Scale:
        if byte == E8M0_NAN:
            raise InvalidScaleError("E8M0 byte 0xFF is the NaN marker")
        if not 0 <= byte < E8M0_NAN:
            raise InvalidScaleError(f"E8M0 byte {byte} out of range")
        return cls(byte - E8M0_BIAS)


def scale_exponents(scale_bytes: np.ndarray) -> np.ndarray:
    """Vectorised :meth:`E8M0Scale.from_byte`, returning int32 exponents."""
    scale_bytes = np.asarray(scale_bytes)
    if np.any(scale_bytes == E8M0_NAN):
        raise InvalidScaleError("E8M0 byte 0xFF is the NaN marker")
    return scale_bytes.astype(np.int32) - E8M0_BIAS
