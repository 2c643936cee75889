"""Low-bit (INT4/INT8) transformer quantization toolkit on numpy.

Group-wise weight and token-wise activation quantization, packed integer
GEMM with a fused dequantization epilogue, Pair-(N:M) pruning,
quantization-aware training with knowledge distillation, layer reduction,
and positional diagnostics.
"""

from .analysis import (
    PositionalStats,
    emit_report,
    parse_report,
    positional_activation_range,
    positional_perplexity,
    quant_error_report,
)
from .container import ModelContainer, load, save
from .distill import KDConfig, TrainConfig, evaluate, kd_loss, qat_train, synth_data, train_float
from .exceptions import (
    ConfigError,
    ContainerError,
    DimensionError,
    Q4FGError,
    RangeError,
    SchemeMisuseError,
    TrainingError,
)
from .gemm import GemmEpilogue, GemmShapeCase, PackedInt4Matrix, bench_gemm, gemm_fused, gemm_int, pack_int4, unpack_int4
from .model import (
    Model,
    ModelConfig,
    QuantStrategy,
    build_model,
    forward,
    layer_reduce,
    perplexity,
    reduce_model,
)
from .pipeline import StrategyTuneResult, quantize_parts, tune_strategy
from .qlinear import quant_linear
from .quant import (
    QTensor,
    QuantScheme,
    activation_scheme,
    dequantize,
    fake_quantize_ste,
    quantize,
    weight_scheme,
)
from .sparsity import CompositionOrder, SparsityMask, l1_mask, masked_quantized_weight, movement_mask
from .tensor import Tensor, backward

__version__ = "0.1.0"
