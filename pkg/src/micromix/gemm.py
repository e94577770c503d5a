"""Reorder-and-quantize and the reference mixed-precision block-scaled GEMM.

Summation order (fixed, so results are bit-reproducible): each output element
has one float32 accumulator. Groups are visited FP4, FP6, FP8; within a group,
32-wide K-blocks in ascending order; each block's dot product is summed in
float32 over ascending k, scaled by ``2**(e_a + e_w)`` via ``ldexp`` and added
to the accumulator. The result is rounded to BF16 once at the end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from micromix.calib import ChannelPlan
from micromix.errors import PlanMismatchError, ShapeError
from micromix.formats import (
    BLOCK_SIZE,
    EIGHT_BIT_FORMATS,
    FP4_E2M1,
    FP6_E3M2,
    FP8_E4M3,
    SIX_BIT_FORMATS,
    MxFormat,
    get_format,
    scale_exponents,
)
from micromix.mx import MxTensor, as_dense, dequantize_tensor, pad_columns, quantize_tensor


def round_bf16(x) -> np.ndarray:
    """float32 -> BF16 bit patterns (uint16), round half to even."""
    bits = np.asarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = (bits + 0x7FFF + ((bits >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


def bf16_to_float32(bits) -> np.ndarray:
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


@dataclass(frozen=True, eq=False)
class Bf16Matrix:
    bits: np.ndarray  # uint16, (rows, cols)

    @classmethod
    def from_float32(cls, x) -> Bf16Matrix:
        return cls(round_bf16(x))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def to_float32(self) -> np.ndarray:
        return bf16_to_float32(self.bits)

    def __eq__(self, other):
        if not isinstance(other, Bf16Matrix):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


def _group_formats(fmt6, fmt8) -> tuple[MxFormat, MxFormat, MxFormat]:
    fmt6, fmt8 = get_format(fmt6), get_format(fmt8)
    if fmt6.name not in SIX_BIT_FORMATS:
        raise ValueError(f"{fmt6.name} is not a 6-bit MX format")
    if fmt8.name not in EIGHT_BIT_FORMATS:
        raise ValueError(f"{fmt8.name} is not an 8-bit MX format")
    return FP4_E2M1, fmt6, fmt8


def _pad_to_plan(x: np.ndarray, plan: ChannelPlan, what: str) -> np.ndarray:
    """Accept either the raw or the padded channel count along axis 1."""
    if x.shape[1] == plan.num_channels:
        x, _ = pad_columns(x)
    if x.shape[1] != plan.padded_channels:
        raise ShapeError(
            f"{what} has {x.shape[1]} channels, plan {plan.layer_id!r} expects {plan.num_channels}"
        )
    return x


@dataclass(frozen=True, eq=False)
class MixedActivation:
    """Activation split into FP4 / FP6 / FP8 column groups."""

    layer_id: str
    parts: tuple[MxTensor, MxTensor, MxTensor]

    @property
    def rows(self) -> int:
        return self.parts[0].rows

    @property
    def counts(self) -> tuple[int, int, int]:
        return tuple(p.cols for p in self.parts)

    def __eq__(self, other):
        if not isinstance(other, MixedActivation):
            return NotImplemented
        return self.layer_id == other.layer_id and all(a == b for a, b in zip(self.parts, other.parts))

    __hash__ = None


@dataclass(frozen=True, eq=False)
class QuantizedLinear:
    """Weight (K x N) reordered by the plan and block-scaled along K.

    Each part is stored transposed, as an ``N x n_g`` :class:`MxTensor`, so its
    32-element blocks run along the contraction dimension.
    """

    plan: ChannelPlan
    weight_parts: tuple[MxTensor, MxTensor, MxTensor]

    @property
    def out_features(self) -> int:
        return self.weight_parts[0].rows

    @property
    def segment_shapes(self) -> tuple[tuple[int, int], ...]:
        """(K-rows, out_features) of each part in the usual ``K x N`` orientation."""
        return tuple((p.cols, p.rows) for p in self.weight_parts)

    def dequantize_part(self, g: int) -> np.ndarray:
        """Dense ``n_g x N`` float32 values of part ``g``."""
        return np.ascontiguousarray(dequantize_tensor(self.weight_parts[g], strip_padding=False).T)

    def __eq__(self, other):
        if not isinstance(other, QuantizedLinear):
            return NotImplemented
        return self.plan == other.plan and all(a == b for a, b in zip(self.weight_parts, other.weight_parts))

    __hash__ = None


def reorder_and_quantize(x, plan: ChannelPlan, fmt6=FP6_E3M2, fmt8=FP8_E4M3) -> MixedActivation:
    """Gather activation columns by the plan and block-quantize each group."""
    fmts = _group_formats(fmt6, fmt8)
    x = _pad_to_plan(as_dense(x, name="activation"), plan, "activation")
    gathered = x[:, plan.permutation]
    parts = tuple(quantize_tensor(gathered[:, sl], f, pad=False) for sl, f in zip(plan.group_slices(), fmts))
    return MixedActivation(plan.layer_id, parts)


def quantize_linear(w, plan: ChannelPlan, fmt6=FP6_E3M2, fmt8=FP8_E4M3) -> QuantizedLinear:
    """One-time offline transform of a dense ``K x N`` weight."""
    fmts = _group_formats(fmt6, fmt8)
    wt = _pad_to_plan(as_dense(w, name="weight").T, plan, "weight (rows)")
    gathered = wt[:, plan.permutation]
    parts = tuple(quantize_tensor(gathered[:, sl], f, pad=False) for sl, f in zip(plan.group_slices(), fmts))
    return QuantizedLinear(plan, parts)


def _accumulate_group(acc, a_vals, a_exp, w_vals, w_exp) -> None:
    # a_vals: (L, K) code values, w_vals: (N, K); exps per 32-block
    for t in range(a_exp.shape[1]):
        partial = np.zeros_like(acc)
        for k in range(t * BLOCK_SIZE, (t + 1) * BLOCK_SIZE):
            partial += a_vals[:, k, None] * w_vals[None, :, k]
        shift = a_exp[:, t, None] + w_exp[None, :, t]
        acc += np.ldexp(partial, shift)


def mixed_gemm_fp32(a: MixedActivation, lin: QuantizedLinear) -> np.ndarray:
    """The float32 accumulator values before BF16 rounding."""
    if a.layer_id != lin.plan.layer_id:
        raise PlanMismatchError(f"activation for {a.layer_id!r} used with weight for {lin.plan.layer_id!r}")
    if a.counts != lin.plan.counts or a.counts != tuple(p.cols for p in lin.weight_parts):
        raise ShapeError(f"group widths differ: activation {a.counts}, weight {lin.plan.counts}")
    acc = np.zeros((a.rows, lin.out_features), dtype=np.float32)
    for ap, wp in zip(a.parts, lin.weight_parts):
        if ap.fmt != wp.fmt:
            raise PlanMismatchError(f"group format mismatch: {ap.fmt.name} vs {wp.fmt.name}")
        if ap.cols == 0:
            continue
        _accumulate_group(
            acc,
            ap.fmt.code_values_f32[ap.codes],
            scale_exponents(ap.scales),
            wp.fmt.code_values_f32[wp.codes],
            scale_exponents(wp.scales),
        )
    return acc


def mixed_gemm(a: MixedActivation, lin: QuantizedLinear) -> Bf16Matrix:
    """``Y = X W`` from quantized operands, FP32 accumulation, BF16 output."""
    return Bf16Matrix.from_float32(mixed_gemm_fp32(a, lin))


def fake_quant_gemm_reference_fp32(x, w, plan: ChannelPlan, fmt6=FP6_E3M2, fmt8=FP8_E4M3) -> np.ndarray:
    """Dequantize-first oracle: fake-quantize dense operands, then multiply.

    Each operand group goes through quantize/dequantize independently, then
    the dense float32 products are summed in the same block order as
    :func:`mixed_gemm`.
    """
    fmts = _group_formats(fmt6, fmt8)
    x = _pad_to_plan(as_dense(x, name="activation"), plan, "activation")
    w = _pad_to_plan(as_dense(w, name="weight").T, plan, "weight (rows)").T
    xp = x[:, plan.permutation]
    wp = w[plan.permutation, :]
    acc = np.zeros((x.shape[0], w.shape[1]), dtype=np.float32)
    for sl, f in zip(plan.group_slices(), fmts):
        xq = dequantize_tensor(quantize_tensor(xp[:, sl], f, pad=False))
        wq = dequantize_tensor(quantize_tensor(np.ascontiguousarray(wp[sl, :].T), f, pad=False)).T
        for start in range(0, xq.shape[1], BLOCK_SIZE):
            partial = np.zeros_like(acc)
            for k in range(start, start + BLOCK_SIZE):
                partial += np.outer(xq[:, k], wq[k, :])
            acc += partial
    return acc


def fake_quant_gemm_reference(x, w, plan: ChannelPlan, fmt6=FP6_E3M2, fmt8=FP8_E4M3) -> Bf16Matrix:
    return Bf16Matrix.from_float32(fake_quant_gemm_reference_fp32(x, w, plan, fmt6, fmt8))
