"""qspec: a desk-scale draft-verify inference engine for 4-bit quantized transformers.

A single weight-quantized model toggles between a fast low-precision-activation
draft path and a high-precision verify path inside a speculative-decoding loop
with KV-cache overwriting, so generation is token-identical to plain
high-precision greedy decoding while most tokens come from the cheap path.
"""

from .costmodel import (
    AcceptanceModel,
    AnalyticReport,
    LatencyProfile,
    ReplayReport,
    SweepRow,
    analytic_speedup,
    format_profile,
    format_sweep_table,
    gamma_sweep,
    illustrative_profile,
    parse_profile,
    replay_trace,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ProfileError,
    QSpecError,
    SequenceOverflowError,
    ShapeError,
    TokenIdError,
    TraceError,
    WorkloadError,
)
from .model import (
    CostCounter,
    KVCache,
    LayerWeights,
    LogitsBlock,
    ModelConfig,
    TransformerModel,
    WriteTarget,
    forward,
    kv_commit,
    kv_memory_report,
    kv_reset,
)
from .quant import (
    ExecutionMode,
    QuantizedTensor,
    dequantize,
    fake_quantize_activations,
    pack_int4,
    qlinear_forward,
    quantize_groupwise,
    unpack_int4,
)
from .serving import (
    BatchState,
    LatencySplit,
    RejectedRequest,
    Request,
    ServingStats,
    format_stats,
    parse_workload,
    per_valid_token_latency,
    run_fcfs,
)
from .specdec import (
    CycleRecord,
    GenerationConfig,
    GenerationResult,
    ProbeRecord,
    SequenceEngine,
    TokenSource,
    accept_greedy,
    draft_phase,
    format_cycle_record,
    format_trace,
    generate_greedy,
    generate_qspec,
    parse_trace,
    similarity_probe,
    verify_phase,
)
from .storage import (
    Lcg64,
    load_checkpoint,
    load_float_checkpoint,
    model_from_float_tensors,
    quantize_checkpoint,
    random_float_tensors,
    random_init,
    save_checkpoint,
    save_float_checkpoint,
)

__version__ = "0.1.0"
