from fractions import Fraction

import numpy as np
import pytest

from micromix.errors import FormatError, InvalidScaleError
from micromix.formats import FORMATS, E8M0Scale, format_from_code, get_format, scale_exponents
from oracles import enumerate_codes

TABLE = {
    "E5M2": (8, 15, Fraction(57344)),
    "E4M3": (8, 7, Fraction(448)),
    "E3M2": (6, 3, Fraction(28)),
    "E2M3": (6, 1, Fraction(15, 2)),
    "E2M1": (4, 1, Fraction(6)),
}


@pytest.mark.parametrize("name", sorted(TABLE))
def test_descriptor_matches_format_table(name):
    bits, bias, q_max = TABLE[name]
    fmt = get_format(name)
    assert fmt.element_bits == bits == 1 + fmt.exponent_bits + fmt.mantissa_bits
    assert fmt.bias == bias
    assert fmt.q_max == q_max
    assert fmt.block_size == 32 and fmt.scale_bits == 8


@pytest.mark.parametrize("name", sorted(TABLE))
def test_code_table_matches_bitfield_enumeration(name):
    fmt = get_format(name)
    table = enumerate_codes(name)
    assert fmt.positive_values.size == len(table)
    for mag, value in table.items():
        assert Fraction(fmt.code_values[mag]) == value
        assert Fraction(fmt.code_values[mag | fmt.sign_mask]) == -value
    assert max(table.values()) == fmt.q_max


def test_e2m1_values():
    assert get_format("E2M1").positive_values.tolist() == [0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]


def test_reserved_encodings():
    e4m3, e5m2 = get_format("E4M3"), get_format("E5M2")
    assert np.isnan(e4m3.code_value(0x7F)) and np.isnan(e4m3.code_value(0xFF))
    assert e4m3.code_value(0x7E) == 448
    assert e5m2.code_value(0x7C) == float("inf") and e5m2.code_value(0xFC) == float("-inf")
    assert np.isnan(e5m2.code_value(0x7D))


@pytest.mark.parametrize("name", sorted(TABLE))
def test_decode_total_and_odd(name):
    fmt = get_format(name)
    for code in range(fmt.n_codes):
        v, nv = fmt.code_value(code), fmt.code_value(fmt.negate(code))
        assert (np.isnan(v) and np.isnan(nv)) or v == -nv


@pytest.mark.parametrize("alias", ["E4M3", "fp8_e4m3", "FP8_E4M3", "e4m3"])
def test_format_lookup(alias):
    assert get_format(alias) is FORMATS["E4M3"]


def test_unknown_format():
    with pytest.raises(FormatError):
        get_format("E1M6")
    with pytest.raises(FormatError):
        format_from_code(9)


def test_e8m0_roundtrip_all_bytes():
    for byte in range(255):
        s = E8M0Scale.from_byte(byte)
        assert s.byte == byte
        assert s.value == 2.0 ** (byte - 127)


def test_e8m0_nan_byte_rejected():
    with pytest.raises(InvalidScaleError):
        E8M0Scale.from_byte(255)
    with pytest.raises(InvalidScaleError):
        scale_exponents(np.array([3, 255], dtype=np.uint8))
    with pytest.raises(InvalidScaleError):
        E8M0Scale(128)
