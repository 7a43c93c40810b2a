"""Cache-reuse strategies over the hybrid forward pass.

Every policy is a configuration of three independent hooks:

  * prefix      - chunk caches built with p discarded blank tokens that
                  absorb sink attention (link0)
  * selection   - which context tokens get their K/V recomputed through the
                  remaining layers: key-drift ranking (cacheblend), fixed
                  beginning-of-chunk sets (epic), auxiliary-model attention
                  (cacheclip), or drift ranking with a mid-layer re-ranking
                  (droidspeak)
  * reshaping   - query-row attention temperature t and scale s applied to
                  context tokens (ape); the combined design (psr) exempts
                  recomputed tokens from the scaling

The combined psr policy and arbitrary ablation subsets compose the same
hooks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cache import ChunkCache, assemble
from .errors import ConfigError, ShapeError
from .model import (
    EOS_ID,
    AssembledContext,
    GenerationResult,
    ModelConfig,
    ModelWeights,
    Reshaping,
    SelectionMask,
    StrategyHooks,
    decode_greedy,
    decode_state_from_prefill,
    full_prefill,
    hybrid_forward,
    project_key,
)
from .tensor_ops import softmax_rows_two_bucket, sum_lr

DEFAULT_R = 0.15
DEFAULT_RESELECT_LAYER = 5

VARIANTS = (
    "full_prefill",
    "naive",
    "cacheblend",
    "epic",
    "link0",
    "ape",
    "cacheclip",
    "droidspeak",
    "psr",
    "ablation",
)

ABLATION_COMPONENTS = ("prefix", "scale", "recompute")


@dataclass(frozen=True)
class StrategyConfig:
    """One reuse policy with its parameters.

    r is the recomputation fraction, p the blank-prefix length, (t, s) the
    attention reshaping factors, reselect_layer the droidspeak re-ranking
    layer, components the ablation subset of {prefix, scale, recompute}.
    """

    variant: str
    r: float = DEFAULT_R
    p: int = 0
    t: float = 1.0
    s: float = 1.0
    reselect_layer: int = DEFAULT_RESELECT_LAYER
    components: tuple[str, ...] = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown strategy variant {self.variant!r}")
        if not 0.0 <= self.r <= 1.0:
            raise ConfigError(f"r must be in [0, 1], got {self.r}")
        if self.p < 0:
            raise ConfigError(f"p must be >= 0, got {self.p}")
        if self.t <= 0 or self.s <= 0:
            raise ConfigError(f"t and s must be positive, got t={self.t}, s={self.s}")
        if self.reselect_layer < 1:
            raise ConfigError(f"reselect_layer must be >= 1, got {self.reselect_layer}")
        if self.variant == "ablation":
            if not self.components:
                raise ConfigError("ablation needs a non-empty component subset")
            for c in self.components:
                if c not in ABLATION_COMPONENTS:
                    raise ConfigError(f"unknown ablation component {c!r}")

    @property
    def prefix_len(self) -> int:
        if self.variant in ("link0", "ape", "cacheclip", "psr"):
            return self.p
        if self.variant == "ablation" and "prefix" in self.components:
            return self.p
        return 0

    @property
    def selector(self) -> Optional[str]:
        if self.variant in ("cacheblend", "psr", "droidspeak"):
            return "deltak"
        if self.variant == "epic":
            return "epic"
        if self.variant == "cacheclip":
            return "aux"
        if self.variant == "ablation" and "recompute" in self.components:
            return "deltak"
        return None

    @property
    def reshaping(self) -> Optional[Reshaping]:
        if self.variant == "ape":
            return Reshaping(t=self.t, s=self.s, exempt_selected=False)
        if self.variant == "psr":
            return Reshaping(t=self.t, s=self.s, exempt_selected=True)
        if self.variant == "ablation" and "scale" in self.components:
            return Reshaping(t=self.t, s=self.s, exempt_selected="recompute" in self.components)
        return None

    @property
    def reselects(self) -> bool:
        return self.variant == "droidspeak"

    @property
    def needed_activation_layers(self) -> tuple[int, ...]:
        return (self.reselect_layer,) if self.reselects else ()

    def params_string(self) -> str:
        parts = []
        if self.variant == "ablation":
            parts.append("components=" + "+".join(self.components))
        used_r = self.selector is not None
        used_p = self.variant in ("link0", "ape", "cacheclip", "psr") or (
            self.variant == "ablation" and "prefix" in self.components
        )
        used_ts = self.reshaping is not None
        if used_r:
            parts.append(f"r={self.r:.6g}")
        if used_p:
            parts.append(f"p={self.p}")
        if used_ts:
            parts.append(f"t={self.t:.6g}")
            parts.append(f"s={self.s:.6g}")
        if self.reselects:
            parts.append(f"reselect_layer={self.reselect_layer}")
        return ";".join(parts)

    def validate_for_model(self, cfg: ModelConfig) -> None:
        if self.selector == "deltak" and cfg.n_layers < 2:
            raise ConfigError(f"{self.variant} needs at least 2 layers to compare keys")
        if self.reselects and not 1 <= self.reselect_layer < cfg.n_layers - 1:
            raise ConfigError(
                f"reselect_layer {self.reselect_layer} must lie in [1, {cfg.n_layers - 1}) "
                "so a later layer exists to compare keys at"
            )


def strategy_from_dict(d: dict) -> StrategyConfig:
    """Parse one strategy entry of an experiment config."""
    d = dict(d)
    variant = d.pop("name", None) or d.pop("variant", None)
    if variant is None:
        raise ConfigError("strategy entry needs a 'name'")
    if "components" in d:
        d["components"] = tuple(d["components"])
    try:
        return StrategyConfig(variant=variant, **d)
    except TypeError as exc:
        raise ConfigError(f"bad strategy parameters for {variant!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# selection primitives


def delta_k(k_recomputed: np.ndarray, k_cached: np.ndarray) -> np.ndarray:
    """Per-token key drift: sum over heads of squared L2 distance.

    Both tensors must be [n, H, d_head] at matched global positions.
    """
    a = np.asarray(k_recomputed, dtype=np.float32)
    b = np.asarray(k_cached, dtype=np.float32)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeError(f"delta_k shapes disagree: {a.shape} vs {b.shape}")
    d = a - b
    return sum_lr((d * d).reshape(a.shape[0], -1), axis=-1)


def _round_count(r: float, n: int) -> int:
    return int(round(r * n))


def select_top_r(scores, r: float) -> frozenset[int]:
    """Indices of the round(r*n) highest scores; ties go to lower index."""
    if not 0.0 <= r <= 1.0:
        raise ConfigError(f"r must be in [0, 1], got {r}")
    scores = np.asarray(scores)
    count = _round_count(r, scores.shape[0])
    order = np.argsort(-scores, kind="stable")
    return frozenset(int(i) for i in order[:count])


def select_epic(segment_lengths, r: float) -> frozenset[int]:
    """First floor(r*len) tokens of each chunk; at least 1 per chunk when r>0."""
    if not 0.0 <= r <= 1.0:
        raise ConfigError(f"r must be in [0, 1], got {r}")
    chosen = []
    start = 0
    for length in segment_lengths:
        count = int(r * length)
        if r > 0 and length > 0 and count == 0:
            count = 1
        chosen.extend(range(start, start + count))
        start += length
    return frozenset(chosen)


def select_cacheclip(
    aux_w: ModelWeights,
    aux_cfg: ModelConfig,
    context_tokens,
    query_tokens,
    r: float,
) -> frozenset[int]:
    """Rank context tokens by the auxiliary model's last-layer query attention.

    The auxiliary model shares the byte tokenizer, so alignment with the main
    model is positional and exact.
    """
    ctx_ids = np.asarray(list(context_tokens), dtype=np.int64)
    q_ids = np.asarray(list(query_tokens), dtype=np.int64)
    n_ctx = ctx_ids.shape[0]
    tokens = np.concatenate([ctx_ids, q_ids])
    if np.any(tokens >= aux_cfg.vocab_size):
        raise ConfigError("auxiliary model vocabulary cannot represent the prompt tokens")
    res = full_prefill(aux_w, aux_cfg, tokens, capture_last_attention=True)
    att = res.last_attention  # [H, n, n]
    if att.shape[1] != tokens.shape[0]:
        raise ShapeError("auxiliary and main token lengths disagree")
    q_to_ctx = att[:, n_ctx:, :n_ctx]  # [H, n_q, n_ctx]
    h, nq, _ = q_to_ctx.shape
    importance = sum_lr(q_to_ctx.reshape(h * nq, n_ctx), axis=0) / np.float32(h * nq)
    count = _round_count(r, n_ctx)
    order = np.argsort(-importance, kind="stable")
    return frozenset(int(i) for i in order[:count])


def apply_ape_reshaping(logits_row, context_labels, t: float, s: float) -> np.ndarray:
    """Two-bucket attention weights for one row: context logits divided by t
    and their exponentials scaled by s; local logits untouched; normalized."""
    row = np.asarray(logits_row, dtype=np.float32).reshape(1, -1)
    return softmax_rows_two_bucket(row, np.asarray(context_labels, dtype=bool), t, s)[0]


# ---------------------------------------------------------------------------
# strategy execution


def deltak_scores(w, cfg, ctx: AssembledContext, x_layer_inputs: np.ndarray, layer: int) -> np.ndarray:
    """Key drift of the given layer from layer-input activations vs the
    cached (re-rotated) keys of the assembled context."""
    n_ctx = ctx.n_ctx
    k = project_key(w, cfg, layer, x_layer_inputs[:n_ctx], np.arange(n_ctx))
    return delta_k(k, ctx.layer_k[layer])


def _deltak_choose_hook(r: float):
    def hook(w, cfg, ctx, x_after_layer0):
        return select_top_r(deltak_scores(w, cfg, ctx, x_after_layer0, 1), r)

    return hook


def _droidspeak_reselect_hook(r: float):
    def hook(w, cfg, ctx, x_layer_out, layer):
        return select_top_r(deltak_scores(w, cfg, ctx, x_layer_out, layer + 1), r)

    return hook


def run_strategy(
    strategy: StrategyConfig,
    w: ModelWeights,
    cfg: ModelConfig,
    chunks: list[ChunkCache],
    query_tokens,
    *,
    aux: Optional[tuple[ModelWeights, ModelConfig]] = None,
    max_new_tokens: int = 16,
    eos_id: int = EOS_ID,
) -> GenerationResult:
    """Execute one reuse policy end to end and greedily decode."""
    strategy.validate_for_model(cfg)
    if strategy.variant == "full_prefill":
        tokens = np.concatenate(
            [c.tokens for c in chunks] + [np.asarray(list(query_tokens), dtype=np.int64)]
        )
        res = full_prefill(w, cfg, tokens)
        return decode_greedy(w, cfg, decode_state_from_prefill(res), max_new_tokens, eos_id)

    for c in chunks:
        if c.prefix_len != strategy.prefix_len:
            raise ConfigError(
                f"strategy {strategy.variant} expects caches built with p={strategy.prefix_len}, "
                f"got a chunk built with p={c.prefix_len}"
            )
    if strategy.reselects:
        for c in chunks:
            if strategy.reselect_layer not in c.activations:
                raise ConfigError(
                    f"droidspeak needs cached activations at layer {strategy.reselect_layer}; "
                    f"chunk {c.chunk_id[:12]} lacks them"
                )

    ctx = assemble(chunks, query_tokens, cfg)
    ctx.reshaping = strategy.reshaping
    budget = _round_count(strategy.r, ctx.n_ctx) if strategy.selector else 0
    hooks = None
    if strategy.selector == "epic":
        ctx.selection_mask = SelectionMask(spans=[(1, select_epic(ctx.segment_lengths, strategy.r))])
    elif strategy.selector == "aux":
        if aux is None:
            raise ConfigError("cacheclip needs an auxiliary model")
        aux_w, aux_cfg = aux
        mask = select_cacheclip(aux_w, aux_cfg, ctx.context_tokens, ctx.query_tokens, strategy.r)
        ctx.selection_mask = SelectionMask(spans=[(1, mask)])
    elif strategy.selector == "deltak" and budget > 0:
        hooks = StrategyHooks(choose_mask=_deltak_choose_hook(strategy.r))
        if strategy.reselects:
            hooks.reselect_layer = strategy.reselect_layer
            hooks.reselect = _droidspeak_reselect_hook(strategy.r)

    ctx, _ = hybrid_forward(w, cfg, ctx, hooks)
    gen = decode_greedy(w, cfg, ctx.decode, max_new_tokens, eos_id)
    gen.selection_trace = list(ctx.selection_mask.spans)
    return gen
