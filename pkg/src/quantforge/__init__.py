"""quantforge: post-training quantization from a small calibration set.

Layerwise weight/step calibration, exact integer-programming bit allocation,
and batch-norm/bias statistics tuning, composed into light (backprop-free)
and advanced pipelines.
"""

from .adaquant import (
    AdaQuantConfig,
    LayerCalibResult,
    adaquant_layer,
    adaquant_parallel,
    adaquant_sequential,
    apply_calibration,
    min_calibration_size,
)
from .allocator import (
    AllocationError,
    BitConfig,
    ChoiceEntry,
    SensitivityTable,
    additivity_diagnostic,
    compression_ratio,
    greedy_accuracy,
    greedy_compression,
    profile_sensitivity,
    solve_ip,
    solve_ip_sweep,
)
from .archive import ArchiveError, load_archive, save_archive
from .bias_tuner import BiasTuneConfig, bias_tune
from .bn_tuner import BnState, reconstruct_bn, refuse_bn, tune_bn
from .graph import (
    CalibrationSet,
    GraphError,
    LayerNode,
    MetricsReport,
    ModelGraph,
    evaluate,
    forward,
    fuse_conv_bn,
)
from .pipeline import PipelineConfig, Report, build_report, run_advanced, run_light
from .quantizer import (
    QuantParams,
    calibrate_step_mse,
    init_minmax,
    quant_codes,
    quantize,
    ste_backward,
)
from .tensor_core import ConvSpec, PoolSpec, as_tensor, conv2d, layer_backward, layer_forward, matmul

__version__ = "0.1.0"
