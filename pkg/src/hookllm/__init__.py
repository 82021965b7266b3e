"""Probe and steer a toy decoder-only transformer through a hook protocol."""

from .analyzers import (
    AnalyzerSpec,
    AttntrackerAnalyzer,
    CorerAnalyzer,
    FocusResult,
    RelevanceResult,
    SpanPair,
    SteeringVector,
    analyze_injection,
    attn2score,
    build_steering_vector,
    compute_attention_from_qk,
    load_qk_cache,
    rerank,
)
from .config import (
    EnvSettings,
    HeadRef,
    HookConfig,
    load_config,
    parse_config,
    parse_layer_heads,
    serialize_layer_heads,
)
from .formats import QKCapture, QKEntry
from .orchestrator import HookLLM, Registry, new_hookllm
from .runtime import (
    GenerationResult,
    HookTap,
    KVCache,
    Model,
    ModelSpec,
    attention_reference,
    detokenize,
    forward,
    generate_greedy,
    init_model,
    load_model,
    tokenize,
)
from .worker import HookManager, SteeringPlan, begin_run, flush_capture, install_probes, install_steering

__version__ = "0.1.0"
