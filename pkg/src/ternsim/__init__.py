"""Bit-exact functional simulator and roofline performance model of a
64-lane ternary-weight inference accelerator.

The pieces compose bottom-up: dfp (8-bit dynamic fixed point), quantizer
(ternary blocks + batch-norm fusion), layout (packed byte images), engine
(the tile/PE datapath over packed memory), graph (networks, memory
planning, execution), host (stem/pool/classifier layers), perf (cycle
model), and oracle/validate (independent references and the randomized
equivalence harness).
"""

from . import oracle, validate
from .dfp import (ACC_BITS, DATA_BITS, DEFAULT_MODE, AccTensor, DfpTensor,
                  ExponentOverflowError, RoundingMode, ShapeError, compute_shift,
                  dfp_add, downconvert_scalar, downconvert_tensor, lzc32,
                  propagate_exponent)
from .engine import (DOT_LANES, DOT_MAX, PES_PER_TILE, TILES, CoreRegs,
                     LayerConfigError, LayerDescriptor, LsuRegs, MemoryImage,
                     Region, RunInfo, accumulate, conv_direct, dot64,
                     eltwise_merge, plan_single_layer, run_layer, scale)
from .graph import (AllocationError, ExecutionResult, FpConvLayer, FpFcLayer,
                    FpModel, GraphError, MemoryPlan, NetworkGraph, NodeSpec,
                    QuantizedModel, QuantLayer, build_graph, build_resnet50,
                    build_toy_residual, execute, graph_from_json, graph_to_json,
                    load_graph, plan_memory, program_registers, quantize_network,
                    save_graph)
from .host import (HostConvWeights, HostFcWeights, quantize_host_conv,
                   quantize_host_fc, run_avgpool_global, run_fc, run_host_conv,
                   run_maxpool, softmax)
from .layout import (FetchPlan, LayoutError, PackedBias, PackedIfm,
                     PackedPartials, PackedScales, PackedWeights, lsu_plan,
                     out_dims, pack_bias, pack_ifm, pack_partials, pack_scales,
                     pack_weights, unpack_bias, unpack_ifm, unpack_partials,
                     unpack_scales, unpack_weights)
from .model_io import (FormatError, load_fp_model, load_quantized,
                       random_fp_model, save_fp_model, save_quantized)
from .perf import (PIPELINE_DEPTH, PRESETS, REFERENCE_TOPS, LayerPerf,
                   PerfReport, TileConfig, layer_cycles, network_perf, peak_tops)
from .quantizer import (BLOCK, BnParams, FusedLayerWeights, InvalidBnParamsError,
                        TernaryBlock, fgq_quantize_layer, fuse_bn, fused_bias,
                        quantize_activations, quantize_alpha, quantize_bias,
                        ternarize_block)

__version__ = "1.0.0"
