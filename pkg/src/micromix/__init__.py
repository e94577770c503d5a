"""Bit-exact MX (microscaling) formats and mixed-precision MXFP4/6/8 quantization."""

from micromix.calib import CalibStats, ChannelPlan, accumulate, build_plan, estimate_proportions, plan_diagnostics
from micromix.error_model import (
    QuantError,
    ThresholdSet,
    exact_fp_error_bound,
    fp_error_bound,
    int_error_bound,
    int_fake_quant,
    quant_error,
    thresholds,
)
from micromix.formats import FORMATS, FP4_E2M1, FP6_E2M3, FP6_E3M2, FP8_E4M3, FP8_E5M2, E8M0Scale, MxFormat, get_format
from micromix.gemm import (
    Bf16Matrix,
    MixedActivation,
    QuantizedLinear,
    fake_quant_gemm_reference,
    mixed_gemm,
    quantize_linear,
    reorder_and_quantize,
    round_bf16,
)
from micromix.mx import (
    MxBlock,
    MxTensor,
    block_scale,
    decode_element,
    dequantize_block,
    dequantize_tensor,
    encode_element,
    quantize_block,
    quantize_tensor,
)
from micromix.report import avg_bits

__version__ = "0.1.0"
