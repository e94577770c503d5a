import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micromix.calib import build_plan, calibrate, identity_plan, make_plan
from micromix.error_model import thresholds
from micromix.errors import PlanMismatchError, ShapeError
from micromix.gemm import (
    Bf16Matrix,
    bf16_to_float32,
    fake_quant_gemm_reference,
    fake_quant_gemm_reference_fp32,
    mixed_gemm,
    mixed_gemm_fp32,
    quantize_linear,
    reorder_and_quantize,
    round_bf16,
)
from micromix.mx import dequantize_tensor, quantize_tensor
from oracles import bf16_round_oracle


def _f32_from_bits(b):
    return struct.unpack("<f", struct.pack("<I", b))[0]


def _random_plan(rng, k, layer="l"):
    total = k // 32
    cuts = np.sort(rng.integers(0, total + 1, 2))
    counts = (32 * int(cuts[0]), 32 * int(cuts[1] - cuts[0]), 32 * int(total - cuts[1]))
    return make_plan(layer, rng.random(k), tuple(c / k for c in counts), thresholds(1.0))


class TestRoundBf16:
    def test_examples(self):
        assert bf16_to_float32(round_bf16(np.float32(1.0))) == 1.0
        assert bf16_to_float32(round_bf16(np.float32(3.1415927))) == 3.140625

    def test_midpoints_go_even(self):
        # low half exactly 0x8000: halfway between two BF16 neighbours
        assert round_bf16(np.float32(_f32_from_bits(0x3F808000))) == 0x3F80
        assert round_bf16(np.float32(_f32_from_bits(0x3F818000))) == 0x3F82

    @settings(max_examples=500)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_oracle(self, bits):
        x = _f32_from_bits(bits)
        if not np.isfinite(x) or abs(x) >= 3.3895313892515355e38:
            return  # values that round past the BF16 max are excluded at ingestion
        assert int(round_bf16(np.float32(x))) == bf16_round_oracle(x)

    def test_matrix_wrapper(self):
        m = Bf16Matrix.from_float32(np.array([[1.0, 3.1415927]], dtype=np.float32))
        assert m.shape == (1, 2)
        assert m.to_float32().tolist() == [[1.0, 3.140625]]


class TestReorderAndQuantize:
    def test_identity_single_fp4_group(self, rng):
        x = rng.standard_normal((4, 32)).astype(np.float32)
        a = reorder_and_quantize(x, identity_plan("l", 32, (32, 0, 0)))
        assert a.parts[0] == quantize_tensor(x, "E2M1")
        assert a.counts == (32, 0, 0)

    def test_degenerate_groups_are_empty(self, rng):
        a = reorder_and_quantize(rng.standard_normal((3, 64)), identity_plan("l", 64, (64, 0, 0)))
        assert a.parts[1].shape == (3, 0) and a.parts[2].shape == (3, 0)

    @pytest.mark.parametrize("fmt6,fmt8", [("E3M2", "E4M3"), ("E2M3", "E5M2")])
    def test_permute_quantize_commutation(self, rng, fmt6, fmt8):
        x = (rng.standard_normal((6, 100)) * np.exp(rng.normal(0, 2, 100))).astype(np.float32)
        plan = build_plan(calibrate("l", [x]))
        a = reorder_and_quantize(x, plan, fmt6, fmt8)
        gathered = np.concatenate([dequantize_tensor(p) for p in a.parts], axis=1)
        back = gathered[:, plan.inverse_permutation()][:, :100]
        # independent path: quantize each group's source columns directly
        padded = np.pad(x, ((0, 0), (0, plan.padding)))
        want = np.empty_like(padded)
        for sl, f in zip(plan.group_slices(), ("E2M1", fmt6, fmt8)):
            cols = plan.permutation[sl]
            want[:, cols] = dequantize_tensor(quantize_tensor(padded[:, cols], f))
        np.testing.assert_array_equal(back, want[:, :100])

    def test_shape_mismatch(self, rng):
        plan = identity_plan("l", 64, (32, 32, 0))
        with pytest.raises(ShapeError):
            reorder_and_quantize(rng.standard_normal((2, 48)), plan)

    def test_rejects_wrong_formats(self, rng):
        plan = identity_plan("l", 32, (32, 0, 0))
        with pytest.raises(ValueError):
            reorder_and_quantize(rng.standard_normal((2, 32)), plan, fmt6="E4M3")
        with pytest.raises(ValueError):
            reorder_and_quantize(rng.standard_normal((2, 32)), plan, fmt8="E2M1")


class TestQuantizeLinear:
    def test_identity_weight_all_fp8(self):
        lin = quantize_linear(np.eye(32), identity_plan("l", 32, (0, 0, 32)))
        np.testing.assert_array_equal(lin.dequantize_part(2), np.eye(32))

    def test_part_shapes(self, rng):
        lin = quantize_linear(rng.standard_normal((64, 32)), identity_plan("l", 64, (32, 32, 0)))
        assert lin.segment_shapes == ((32, 32), (32, 32), (0, 32))
        assert lin.out_features == 32

    def test_blocks_run_along_k(self, rng):
        # one huge entry per column only affects that column's K-block
        w = rng.standard_normal((64, 8)).astype(np.float32)
        w[0, 3] = 1e6
        lin = quantize_linear(w, identity_plan("l", 64, (0, 0, 64)))
        exps = lin.weight_parts[2].scales.astype(int) - 127
        assert exps.shape == (8, 2)
        assert exps[3, 0] > exps[3, 1] and exps[3, 0] > np.delete(exps[:, 0], 3).max()

    def test_layout_independence(self, rng):
        w = rng.standard_normal((96, 16)).astype(np.float32)
        plan = _random_plan(rng, 96)
        lin = quantize_linear(w, plan)
        # quantizing the transposed copy column-block by column-block gives the same values
        wp = w[plan.permutation]
        for g, (sl, f) in enumerate(zip(plan.group_slices(), ("E2M1", "E3M2", "E4M3"))):
            want = dequantize_tensor(quantize_tensor(np.ascontiguousarray(wp[sl].T), f, pad=False)).T
            np.testing.assert_array_equal(lin.dequantize_part(g), want)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ShapeError):
            quantize_linear(rng.standard_normal((40, 8)), identity_plan("l", 64, (64, 0, 0)))


class TestMixedGemm:
    def test_zero_activation(self, rng):
        plan = identity_plan("l", 64, (32, 0, 32))
        lin = quantize_linear(rng.standard_normal((64, 8)), plan)
        y = mixed_gemm(reorder_and_quantize(np.zeros((4, 64)), plan), lin)
        assert not y.bits.any()

    def test_one_hot_selection(self, rng):
        plan = identity_plan("l", 32, (0, 0, 32))
        w = np.zeros((32, 8), dtype=np.float32)
        w[5] = [0.5, -1, 2, 3.5, -448, 0.125, 7, 10]  # each is alone in its K-block, so exact in E4M3
        x = np.zeros((1, 32), dtype=np.float32)
        x[0, 5] = 1.0
        y = mixed_gemm(reorder_and_quantize(x, plan), quantize_linear(w, plan))
        assert y == Bf16Matrix.from_float32(w[5][None, :])

    def test_worked_example_matches_reference(self, rng):
        x = rng.standard_normal((8, 64)).astype(np.float32)
        w = rng.standard_normal((64, 16)).astype(np.float32)
        plan = identity_plan("l", 64, (32, 32, 0))
        y = mixed_gemm(reorder_and_quantize(x, plan), quantize_linear(w, plan))
        assert y == fake_quant_gemm_reference(x, w, plan)

    @pytest.mark.parametrize("fmt6,fmt8", [("E3M2", "E4M3"), ("E2M3", "E5M2"), ("E3M2", "E5M2")])
    def test_reference_equivalence(self, rng, fmt6, fmt8):
        for _ in range(5):
            m, k, n = (int(v) for v in rng.integers(1, 40, 3))
            k *= 3
            x = (rng.standard_normal((m, k)) * np.exp(rng.normal(0, 2, k))).astype(np.float32)
            w = rng.standard_normal((k, n)).astype(np.float32)
            plan = build_plan(calibrate("l", [x]))
            a = reorder_and_quantize(x, plan, fmt6, fmt8)
            lin = quantize_linear(w, plan, fmt6, fmt8)
            got = mixed_gemm_fp32(a, lin)
            want = fake_quant_gemm_reference_fp32(x, w, plan, fmt6, fmt8)
            np.testing.assert_array_equal(got.view(np.uint32), want.view(np.uint32))

    def test_integer_matrices_exact(self, rng):
        # small integers are exact in every group format and their sums stay exact in float32
        ints = np.array([0, 1, 2, 3, 4, 6, -1, -2, -3, -4, -6], dtype=np.float32)
        for _ in range(10):
            k = 32 * int(rng.integers(1, 5))
            x = rng.choice(ints, size=(5, k))
            w = rng.choice(ints, size=(k, 7))
            plan = _random_plan(rng, k)
            y = mixed_gemm_fp32(reorder_and_quantize(x, plan), quantize_linear(w, plan))
            np.testing.assert_array_equal(y, (x.astype(np.int64) @ w.astype(np.int64)).astype(np.float32))

    def test_permutation_soundness(self, rng):
        k = 128
        x = rng.standard_normal((6, k)).astype(np.float32)
        w = rng.standard_normal((k, 5)).astype(np.float32)
        plan = _random_plan(rng, k)
        base = mixed_gemm(reorder_and_quantize(x, plan), quantize_linear(w, plan))
        # permute the operands and compose the plan with the inverse: same gathered data
        p = rng.permutation(k)
        inv = np.argsort(p)
        moved = type(plan)("l", k, inv[plan.permutation], *plan.counts, *plan.proportions, plan.thresholds)
        xp, wp = x[:, p], w[p, :]
        assert mixed_gemm(reorder_and_quantize(xp, moved), quantize_linear(wp, moved)) == base

    def test_power_of_two_scaling(self, rng):
        x = rng.standard_normal((4, 96)).astype(np.float32)
        w = rng.standard_normal((96, 6)).astype(np.float32)
        plan = _random_plan(rng, 96)
        lin = quantize_linear(w, plan)
        base = mixed_gemm_fp32(reorder_and_quantize(x, plan), lin)
        for j in (-7, 3, 20):
            a = reorder_and_quantize(np.ldexp(x, j), plan)
            np.testing.assert_array_equal(mixed_gemm_fp32(a, lin), np.ldexp(base, j))

    def test_plan_mismatch(self, rng):
        p1 = identity_plan("a", 64, (32, 32, 0))
        p2 = identity_plan("b", 64, (32, 32, 0))
        p3 = identity_plan("a", 64, (64, 0, 0))
        x, w = rng.standard_normal((2, 64)), rng.standard_normal((64, 3))
        with pytest.raises(PlanMismatchError):
            mixed_gemm(reorder_and_quantize(x, p1), quantize_linear(w, p2))
        with pytest.raises(ShapeError):
            mixed_gemm(reorder_and_quantize(x, p1), quantize_linear(w, p3))
        with pytest.raises(PlanMismatchError):
            mixed_gemm(reorder_and_quantize(x, p1, fmt6="E2M3"), quantize_linear(w, p1))

    def test_padded_channels(self, rng):
        x = rng.standard_normal((3, 40)).astype(np.float32)
        w = rng.standard_normal((40, 4)).astype(np.float32)
        plan = build_plan(calibrate("l", [x]))
        y = mixed_gemm(reorder_and_quantize(x, plan), quantize_linear(w, plan))
        assert y.shape == (3, 4)
        assert y == fake_quant_gemm_reference(x, w, plan)
