"""Desk-scale lab for draft-guided sparse attention in speculative decoding.

Toy draft/target transformers, attention-trace collection, offline head
mapping, draft-derived top-k sparsity masks for prefill and decode, a
greedy speculative-decoding runtime with the per-round mask lifecycle, and
a logical-time KV-offload simulator.
"""

from .corpus import planted_model_pair, synthetic_corpus
from .errors import (
    CapacityError,
    ChecksumError,
    ConfigError,
    ContractViolation,
    InputError,
    SpecSparseError,
    TraceLoadError,
    VersionMismatchError,
)
from .headmap import HeadMapping, MappingSet, find_head_mapping, load_mapping, save_mapping
from .offloadsim import LatencyReport, OffloadConfig, compare_strategies, simulate
from .sparsity import (
    SparsityConfig,
    draft_masks_decode,
    draft_masks_prefill,
    page_aggregate,
    remap_masks,
    sparse_attention,
)
from .specdec import (
    GenerateResult,
    ModelSession,
    SpecConfig,
    generate,
    greedy_generate,
    propose,
    verify,
)
from .toymodel import (
    ForwardRecord,
    ModelConfig,
    ModelWeights,
    PagedKVCache,
    forward_decode,
    forward_prefill,
    init_model,
    load_weights,
    perplexity,
    save_weights,
)
from .tracestore import TraceSet, collect_traces, load_traces, save_traces

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "ChecksumError",
    "ConfigError",
    "ContractViolation",
    "ForwardRecord",
    "GenerateResult",
    "HeadMapping",
    "InputError",
    "LatencyReport",
    "MappingSet",
    "ModelConfig",
    "ModelSession",
    "ModelWeights",
    "OffloadConfig",
    "PagedKVCache",
    "SparsityConfig",
    "SpecConfig",
    "SpecSparseError",
    "TraceLoadError",
    "TraceSet",
    "VersionMismatchError",
    "collect_traces",
    "compare_strategies",
    "draft_masks_decode",
    "draft_masks_prefill",
    "find_head_mapping",
    "forward_decode",
    "forward_prefill",
    "generate",
    "greedy_generate",
    "init_model",
    "load_mapping",
    "load_traces",
    "load_weights",
    "page_aggregate",
    "perplexity",
    "planted_model_pair",
    "propose",
    "remap_masks",
    "save_mapping",
    "save_traces",
    "save_weights",
    "simulate",
    "sparse_attention",
    "synthetic_corpus",
    "verify",
]
