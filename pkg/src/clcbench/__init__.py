"""Chunk-level KV-cache reuse engine and benchmark harness."""

from .cache import ChunkCache, ChunkStore, assemble, build_chunk_cache, cache_key
from .dataset import DatasetItem, generate_synthetic, load_dataset
from .metrics import adjusted_f1, cumulative_delta_k, f1, ideal_layer_selection, normalize_answer, selection_overlap
from .model import (
    AssembledContext,
    GenerationResult,
    ModelConfig,
    ModelWeights,
    decode_greedy,
    detokenize,
    full_prefill,
    hybrid_forward,
    init_model,
    load_weights,
    save_weights,
    tokenize,
    weights_fingerprint,
)
from .strategies import (
    StrategyConfig,
    apply_ape_reshaping,
    delta_k,
    run_strategy,
    select_cacheclip,
    select_epic,
    select_top_r,
)

__version__ = "0.1.0"
