"""Fixed-point quantization and a bit-exact functional model of a
shift-based CNN accelerator."""

from .dataflow import (CostReport, Schedule, choose_dataflow, estimate_cost, layer_cost_sweep,
                       make_schedule, run_schedule)
from .fixq import (AccumulatorOverflow, FixedScalar, FixedVector, Pow2Weights, QTensor,
                   requantize, shift_mac)
from .inference import compare_float, peak_throughput, run_inference
from .kernels import PE_CONFIGS, LayerSpec, conv11, conv33, dw33, fused_11_dw, fused_33_dw, head11
from .model import FloatLayer, FloatModel, load_model, mobilenet_like, quantize_network, save_model
from .quantizer import (lloyd_activation_fit, merge_scales, pow2_weight_fit, quantize_activation,
                        quantize_scale)
from .sysmodel import StageSpec, assign_threads, pipeline_throughput
from .tiling import TilePlan, execute_tiled, plan_tiles

__version__ = "0.1.0"
