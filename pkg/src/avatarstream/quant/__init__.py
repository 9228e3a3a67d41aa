"""Simulated INT8 post-training quantization of the denoiser."""

from .bench import matmul_throughput_report
from .core import (
    QuantError,
    affine_qparams,
    dequantize,
    integer_conv1d,
    integer_conv2d,
    integer_linear,
    quantize_activations,
    quantize_tensor,
    quantize_weights,
    symmetric_scales,
)
from .forward import IntegerLayer, QuantizedDenoiser, quantized_forward
from .mixed import InfeasibleError, MixedPrecisionResult, build_mixed_precision, sensitivity_scan
from .spec import (
    CalibStats,
    LayerQuant,
    LayerStats,
    QuantSpec,
    QuantSpecError,
    build_quant_spec,
    calibrate,
    file_crc,
    load_calib_cache,
    make_calib_batches,
    quantizable_layers,
    save_calib_cache,
    validate_spec,
)

__all__ = [
    "CalibStats",
    "InfeasibleError",
    "IntegerLayer",
    "LayerQuant",
    "LayerStats",
    "MixedPrecisionResult",
    "QuantError",
    "QuantSpec",
    "QuantSpecError",
    "QuantizedDenoiser",
    "affine_qparams",
    "build_mixed_precision",
    "build_quant_spec",
    "calibrate",
    "dequantize",
    "file_crc",
    "integer_conv1d",
    "integer_conv2d",
    "integer_linear",
    "load_calib_cache",
    "make_calib_batches",
    "matmul_throughput_report",
    "quantizable_layers",
    "quantize_activations",
    "quantize_tensor",
    "quantize_weights",
    "quantized_forward",
    "save_calib_cache",
    "sensitivity_scan",
    "symmetric_scales",
    "validate_spec",
]
