"""Hadamard-rotated low-precision training of linear layers, at desk scale.

Submodules:

``tensor_core``  2-D tensor contract, outlier tools, the ``HALT`` file format
``hadamard``     Sylvester/Paley Hadamard matrices and fast transforms
``quantize``     INT8 / FP8 / FP6 / MXFP6 symmetric RTN quantizers
``halo_linear``  linear layers with rotation placements and HALO presets
``hqfsdp``       in-process simulation of quantized sharded data parallelism
``trainer``      toy model, AdamW, training loop and gradient-quality probes
``cli``          the ``halo`` command
"""

from . import hadamard, halo_linear, hqfsdp, quantize, tensor_core
from .halo_linear import HaloLinear, HaloScheme
from .quantize import Granularity, NumericFormat, QuantizedTensor, dequantize, qmatmul
from .quantize import quantize as quantize_tensor

__version__ = "0.1.0"

__all__ = [
    "Granularity",
    "HaloLinear",
    "HaloScheme",
    "NumericFormat",
    "QuantizedTensor",
    "dequantize",
    "hadamard",
    "halo_linear",
    "hqfsdp",
    "qmatmul",
    "quantize",
    "quantize_tensor",
    "tensor_core",
]
