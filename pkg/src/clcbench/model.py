"""Deterministic toy decoder-only transformer.

Pre-norm architecture with RMSNorm, rotary position embeddings on Q/K,
and a SiLU-gated feed-forward with hidden size 4*d_model. Weights are
drawn from a seeded PCG64 stream so the same (config, seed) always yields
bit-identical weights. All forward passes route through the left-to-right
kernels in tensor_ops, so outputs are bit-stable across runs.

Supports three execution modes:
  * full_prefill      - causal pass over a whole token sequence
  * hybrid_forward    - stitched cached context + selective recomputation
  * decode_greedy     - argmax decoding appending to merged KV state
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ShapeError,
    TruncatedFileError,
    VersionMismatchError,
)
from .tensor_ops import (
    RopeParams,
    matmul,
    rmsnorm,
    rope_apply,
    softmax_rows,
    softmax_rows_two_bucket,
)

F32 = np.float32

BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
N_SPECIALS = 3
MIN_VOCAB = 256 + N_SPECIALS
SPACE_ID = 0x20

WEIGHTS_MAGIC = b"CLCW"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int = MIN_VOCAB
    rope_theta: float = 10000.0
    max_positions: int = 1024
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 1 or self.n_heads < 1 or self.d_model < 1:
            raise ConfigError("n_layers, n_heads and d_model must be positive")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2 != 0:
            raise ConfigError(f"d_head {self.d_model // self.n_heads} must be even")
        if self.vocab_size < MIN_VOCAB:
            raise ConfigError(f"vocab_size must be >= {MIN_VOCAB} (256 bytes + specials)")
        if self.max_positions < 1 or self.rope_theta <= 0 or self.norm_eps <= 0:
            raise ConfigError("max_positions, rope_theta and norm_eps must be positive")
        # canonicalize to float32 so configs round-trip through the f32 file header
        object.__setattr__(self, "rope_theta", float(F32(self.rope_theta)))
        object.__setattr__(self, "norm_eps", float(F32(self.norm_eps)))

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope(self) -> RopeParams:
        return RopeParams(theta=self.rope_theta, d_head=self.d_head)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # [d]
    wq: np.ndarray  # [d, d]
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray  # [d]
    w1: np.ndarray  # [d, 4d]
    w2: np.ndarray  # [4d, d]


@dataclass
class ModelWeights:
    embedding: np.ndarray  # [vocab, d]
    layers: list[LayerWeights]
    final_norm: np.ndarray  # [d]
    head: np.ndarray  # [d, vocab]
    _fingerprint: Optional[str] = field(default=None, repr=False, compare=False)

    def tensors(self):
        """Yield (name, array) in the canonical serialization order."""
        yield "embedding", self.embedding
        for i, lw in enumerate(self.layers):
            yield f"layers.{i}.attn_norm", lw.attn_norm
            yield f"layers.{i}.wq", lw.wq
            yield f"layers.{i}.wk", lw.wk
            yield f"layers.{i}.wv", lw.wv
            yield f"layers.{i}.wo", lw.wo
            yield f"layers.{i}.ffn_norm", lw.ffn_norm
            yield f"layers.{i}.w1", lw.w1
            yield f"layers.{i}.w2", lw.w2
        yield "final_norm", self.final_norm
        yield "head", self.head


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def init_model(config: ModelConfig, seed: int) -> ModelWeights:
    """Draw weights from a seeded PCG64 stream.

    Draw order: embedding, then per layer wq, wk, wv, wo, w1, w2, then the
    output head; norm vectors are ones. Projections are scaled by
    1/sqrt(fan_in) so a random model still produces varied attention.
    """
    rng = np.random.default_rng(seed)
    d = config.d_model
    hidden = 4 * d

    def draw(shape, std):
        return _freeze(rng.standard_normal(shape, dtype=F32) * F32(std))

    embedding = draw((config.vocab_size, d), 1.0)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                attn_norm=_freeze(np.ones(d, dtype=F32)),
                wq=draw((d, d), 1.0 / math.sqrt(d)),
                wk=draw((d, d), 1.0 / math.sqrt(d)),
                wv=draw((d, d), 1.0 / math.sqrt(d)),
                wo=draw((d, d), 1.0 / math.sqrt(d)),
                ffn_norm=_freeze(np.ones(d, dtype=F32)),
                w1=draw((d, hidden), 1.0 / math.sqrt(d)),
                w2=draw((hidden, d), 1.0 / math.sqrt(hidden)),
            )
        )
    final_norm = _freeze(np.ones(d, dtype=F32))
    head = draw((d, config.vocab_size), 1.0 / math.sqrt(d))
    return ModelWeights(embedding=embedding, layers=layers, final_norm=final_norm, head=head)


def _config_pack(config: ModelConfig) -> bytes:
    return struct.pack(
        "<IIIIIff",
        config.n_layers,
        config.n_heads,
        config.d_model,
        config.vocab_size,
        config.max_positions,
        config.rope_theta,
        config.norm_eps,
    )


def weights_fingerprint(w: ModelWeights, config: ModelConfig) -> str:
    """Stable hex digest over config and all weight tensors."""
    if w._fingerprint is None:
        h = hashlib.sha256()
        h.update(_config_pack(config))
        for _, arr in w.tensors():
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        w._fingerprint = h.hexdigest()
    return w._fingerprint


def save_weights(w: ModelWeights, config: ModelConfig, path) -> None:
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<I", WEIGHTS_VERSION))
        f.write(_config_pack(config))
        for _, arr in w.tensors():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_weights(path) -> tuple[ModelWeights, ModelConfig]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != WEIGHTS_MAGIC:
            raise BadMagicError(f"expected magic {WEIGHTS_MAGIC!r}, got {magic!r}")
        raw = f.read(4)
        if len(raw) < 4:
            raise TruncatedFileError("file ends inside the version field", "version")
        (version,) = struct.unpack("<I", raw)
        if version != WEIGHTS_VERSION:
            raise VersionMismatchError(f"unsupported weights version {version}")
        hdr = f.read(struct.calcsize("<IIIIIff"))
        if len(hdr) < struct.calcsize("<IIIIIff"):
            raise TruncatedFileError("file ends inside the config header", "config")
        n_layers, n_heads, d_model, vocab, max_pos, theta, eps = struct.unpack("<IIIIIff", hdr)
        config = ModelConfig(
            n_layers=n_layers,
            n_heads=n_heads,
            d_model=d_model,
            vocab_size=vocab,
            rope_theta=float(theta),
            max_positions=max_pos,
            norm_eps=float(eps),
        )

        def read_tensor(name, shape):
            nbytes = int(np.prod(shape)) * 4
            buf = f.read(nbytes)
            if len(buf) < nbytes:
                raise TruncatedFileError(f"file truncated while reading tensor {name}", name)
            return _freeze(np.frombuffer(buf, dtype="<f4").reshape(shape).astype(F32))

        d = config.d_model
        hidden = 4 * d
        embedding = read_tensor("embedding", (vocab, d))
        layers = []
        for i in range(n_layers):
            layers.append(
                LayerWeights(
                    attn_norm=read_tensor(f"layers.{i}.attn_norm", (d,)),
                    wq=read_tensor(f"layers.{i}.wq", (d, d)),
                    wk=read_tensor(f"layers.{i}.wk", (d, d)),
                    wv=read_tensor(f"layers.{i}.wv", (d, d)),
                    wo=read_tensor(f"layers.{i}.wo", (d, d)),
                    ffn_norm=read_tensor(f"layers.{i}.ffn_norm", (d,)),
                    w1=read_tensor(f"layers.{i}.w1", (d, hidden)),
                    w2=read_tensor(f"layers.{i}.w2", (hidden, d)),
                )
            )
        final_norm = read_tensor("final_norm", (d,))
        head = read_tensor("head", (d, vocab))
    return ModelWeights(embedding=embedding, layers=layers, final_norm=final_norm, head=head), config


# ---------------------------------------------------------------------------
# tokenizer


def tokenize(text) -> list[int]:
    """Byte-level tokens: byte value b maps to token id b."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(ids) -> bytes:
    """Inverse of tokenize; special ids decode to nothing."""
    out = bytearray()
    for t in ids:
        t = int(t)
        if t < 0 or t >= MIN_VOCAB:
            raise ValueError(f"token id {t} is outside the byte tokenizer range")
        if t < 256:
            out.append(t)
    return bytes(out)


# ---------------------------------------------------------------------------
# forward machinery


@dataclass
class LayerKV:
    """Per-layer cached keys/values; K carries RoPE at the recorded positions."""

    k: np.ndarray  # [n, H, d_head]
    v: np.ndarray  # [n, H, d_head]
    positions: np.ndarray  # [n] int64, strictly increasing


@dataclass(frozen=True)
class Reshaping:
    """Attention reshaping for query/generated rows: softmax temperature t
    applied to context-token logits and a post-exponential scale s; when
    exempt_selected is set, recomputed context tokens join the local bucket."""

    t: float
    s: float
    exempt_selected: bool = False

    def __post_init__(self):
        if self.t <= 0 or self.s <= 0:
            raise ConfigError(f"reshaping factors must be positive, got t={self.t}, s={self.s}")


@dataclass
class SelectionMask:
    """Recomputation mask per layer range.

    spans is a list of (start_layer, selected context indices); the mask in
    force at layer l is the last span whose start is <= l. Strategies with a
    single selection produce one span starting at layer 1.
    """

    spans: list[tuple[int, frozenset[int]]] = field(default_factory=list)

    def mask_at(self, layer: int) -> frozenset[int]:
        current: frozenset[int] = frozenset()
        for start, mask in self.spans:
            if start <= layer:
                current = mask
        return current


@dataclass
class DecodeState:
    """Merged per-layer KV plus reshaping policy, ready for greedy decode."""

    layer_k: list[np.ndarray]
    layer_v: list[np.ndarray]
    n_total: int
    n_ctx: int
    reshaping: Optional[Reshaping]
    exempt: frozenset[int]
    last_logits: np.ndarray


@dataclass
class AssembledContext:
    """Stitched serving-time state: re-rotated chunk caches plus query tokens."""

    segments: list[tuple[str, int]]  # (chunk_id, global start)
    segment_lengths: list[int]
    context_tokens: np.ndarray  # [n_ctx] int64
    query_tokens: np.ndarray  # [n_q] int64
    layer_k: list[np.ndarray]  # [L][n_ctx, H, d_head] cached K at global positions
    layer_v: list[np.ndarray]
    cached_activations: dict[int, np.ndarray] = field(default_factory=dict)
    selection_mask: SelectionMask = field(default_factory=SelectionMask)
    reshaping: Optional[Reshaping] = None
    prefix_len: int = 0
    decode: Optional[DecodeState] = None

    @property
    def n_ctx(self) -> int:
        return int(self.context_tokens.shape[0])


@dataclass
class StrategyHooks:
    """Selection hooks invoked by hybrid_forward.

    choose_mask runs after the full-width first layer and returns the set of
    context indices to recompute. reselect runs at reselect_layer on the
    outputs of a full-width pass of that layer and returns a replacement set.
    """

    choose_mask: Optional[Callable] = None  # (w, cfg, ctx, x_after_layer0) -> set[int]
    reselect_layer: Optional[int] = None
    reselect: Optional[Callable] = None  # (w, cfg, ctx, x_layer_out, layer) -> set[int]


@dataclass
class PrefillResult:
    layer_kv: list[LayerKV]
    last_logits: np.ndarray  # [vocab]
    layer_inputs: Optional[list[np.ndarray]] = None  # [L][n, d]
    last_attention: Optional[np.ndarray] = None  # [H, n, n]


def _rope_heads(t: np.ndarray, positions: np.ndarray, rp: RopeParams) -> np.ndarray:
    n, h, dh = t.shape
    flat = t.reshape(n * h, dh)
    pos = np.repeat(np.asarray(positions, dtype=np.int64), h)
    return rope_apply(flat, pos, rp).reshape(n, h, dh)


def _project_qkv(lw: LayerWeights, cfg: ModelConfig, x_rows: np.ndarray, positions: np.ndarray):
    n = x_rows.shape[0]
    a = rmsnorm(x_rows, lw.attn_norm, cfg.norm_eps)
    q = matmul(a, lw.wq).reshape(n, cfg.n_heads, cfg.d_head)
    k = matmul(a, lw.wk).reshape(n, cfg.n_heads, cfg.d_head)
    v = matmul(a, lw.wv).reshape(n, cfg.n_heads, cfg.d_head)
    q = _rope_heads(q, positions, cfg.rope)
    k = _rope_heads(k, positions, cfg.rope)
    return q, k, v


def _attend_block(
    lw: LayerWeights,
    cfg: ModelConfig,
    x_rows: np.ndarray,
    q: np.ndarray,
    k_all: np.ndarray,
    v_all: np.ndarray,
    q_pos: np.ndarray,
    key_pos: np.ndarray,
    reshaping: Optional[Reshaping] = None,
    local_rows: Optional[np.ndarray] = None,
    scaled_cols: Optional[np.ndarray] = None,
    capture_attention: bool = False,
):
    """Causal attention of q rows over merged k/v, then residual + FFN."""
    n_act = q.shape[0]
    n_keys = k_all.shape[0]
    inv_scale = F32(1.0 / math.sqrt(cfg.d_head))
    causal = np.asarray(key_pos)[None, :] > np.asarray(q_pos)[:, None]
    heads_out = np.empty((n_act, cfg.d_model), dtype=F32)
    att_stack = np.empty((cfg.n_heads, n_act, n_keys), dtype=F32) if capture_attention else None
    use_buckets = (
        reshaping is not None
        and local_rows is not None
        and scaled_cols is not None
        and bool(np.any(local_rows))
    )
    for h in range(cfg.n_heads):
        scores = matmul(q[:, h, :], k_all[:, h, :].T) * inv_scale
        scores[causal] = -np.inf
        if use_buckets:
            att = np.empty_like(scores)
            plain = ~local_rows
            if np.any(plain):
                att[plain] = softmax_rows(scores[plain], 1.0)
            att[local_rows] = softmax_rows_two_bucket(
                scores[local_rows], scaled_cols, reshaping.t, reshaping.s
            )
        else:
            att = softmax_rows(scores, 1.0)
        if att_stack is not None:
            att_stack[h] = att
        heads_out[:, h * cfg.d_head : (h + 1) * cfg.d_head] = matmul(att, v_all[:, h, :])
    x = x_rows + matmul(heads_out, lw.wo)
    f = rmsnorm(x, lw.ffn_norm, cfg.norm_eps)
    h1 = matmul(f, lw.w1)
    gated = h1 * (F32(1.0) / (F32(1.0) + np.exp(-h1)))
    x = x + matmul(gated, lw.w2)
    return x, att_stack


def _layer_full(lw, cfg, x, positions, capture_attention=False):
    q, k, v = _project_qkv(lw, cfg, x, positions)
    x, att = _attend_block(
        lw, cfg, x, q, k, v, positions, positions, capture_attention=capture_attention
    )
    return x, k, v, att


def _last_logits(w: ModelWeights, cfg: ModelConfig, x_last_row: np.ndarray) -> np.ndarray:
    return matmul(rmsnorm(x_last_row, w.final_norm, cfg.norm_eps), w.head)[0]


def project_key(
    w: ModelWeights, cfg: ModelConfig, layer: int, x_rows: np.ndarray, positions
) -> np.ndarray:
    """K projection of one layer from given layer-input activations, rotated
    to the given positions. Used to score recomputed-vs-cached key drift."""
    lw = w.layers[layer]
    a = rmsnorm(x_rows, lw.attn_norm, cfg.norm_eps)
    k = matmul(a, lw.wk).reshape(x_rows.shape[0], cfg.n_heads, cfg.d_head)
    return _rope_heads(k, np.asarray(positions, dtype=np.int64), cfg.rope)


def full_prefill(
    w: ModelWeights,
    cfg: ModelConfig,
    tokens,
    *,
    positions=None,
    capture_layer_inputs: bool = False,
    capture_last_attention: bool = False,
) -> PrefillResult:
    """Causal pass over the whole sequence, retaining per-layer K/V.

    positions defaults to 0..n-1; passing an offset range prefills "as if"
    the sequence started at that offset (used by re-rotation oracles).
    """
    ids = np.asarray(list(tokens), dtype=np.int64)
    n = ids.shape[0]
    if n < 1:
        raise ValueError("full_prefill needs at least one token")
    if positions is None:
        positions = np.arange(n, dtype=np.int64)
    else:
        positions = np.asarray(positions, dtype=np.int64)
    if positions.shape != (n,):
        raise ShapeError(f"positions shape {positions.shape} does not match {n} tokens")
    if int(positions[-1]) >= cfg.max_positions:
        raise ValueError(f"sequence reaches position {int(positions[-1])}, max is {cfg.max_positions}")
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise ValueError("token id outside vocabulary")

    x = w.embedding[ids].astype(F32)
    layer_kv = []
    layer_inputs = [] if capture_layer_inputs else None
    last_att = None
    for li, lw in enumerate(w.layers):
        if layer_inputs is not None:
            layer_inputs.append(x)
        want_att = capture_last_attention and li == cfg.n_layers - 1
        x, k, v, att = _layer_full(lw, cfg, x, positions, capture_attention=want_att)
        if want_att:
            last_att = att
        layer_kv.append(LayerKV(k=k, v=v, positions=positions.copy()))
    logits = _last_logits(w, cfg, x[-1:])
    return PrefillResult(layer_kv=layer_kv, last_logits=logits, layer_inputs=layer_inputs, last_attention=last_att)


def hybrid_forward(
    w: ModelWeights,
    cfg: ModelConfig,
    ctx: AssembledContext,
    hooks: Optional[StrategyHooks] = None,
) -> tuple[AssembledContext, np.ndarray]:
    """Selective-recompute pass over a stitched context plus query tokens.

    The first layer always runs full-width from embeddings. A choose_mask
    hook may then pick the recomputation set; from the second layer onward
    only selected and query tokens propagate, attending over the merged
    cached/recomputed KV view. Recomputed K/V overwrite the merged view for
    selected tokens. Attention reshaping, when configured, applies to query
    and generated rows from the second layer on.
    """
    n_ctx = ctx.n_ctx
    nq = int(ctx.query_tokens.shape[0])
    if n_ctx == 0:
        raise ValueError("hybrid_forward needs a non-empty context")
    if nq == 0:
        raise ValueError("hybrid_forward needs at least one query token")
    n_total = n_ctx + nq
    if n_total > cfg.max_positions:
        raise ValueError(f"context of {n_total} tokens exceeds max_positions {cfg.max_positions}")
    if len(ctx.layer_k) != cfg.n_layers:
        raise ShapeError("assembled context layer count does not match the model")

    all_tokens = np.concatenate([ctx.context_tokens, ctx.query_tokens])
    positions = np.arange(n_total, dtype=np.int64)
    query_idx = np.arange(n_ctx, n_total)

    # merged views: cached context rows; query rows filled as layers run
    merged_k = []
    merged_v = []
    for li in range(cfg.n_layers):
        mk = np.zeros((n_total, cfg.n_heads, cfg.d_head), dtype=F32)
        mv = np.zeros_like(mk)
        mk[:n_ctx] = ctx.layer_k[li]
        mv[:n_ctx] = ctx.layer_v[li]
        merged_k.append(mk)
        merged_v.append(mv)

    x = w.embedding[all_tokens].astype(F32)
    x, k0, v0, _ = _layer_full(w.layers[0], cfg, x, positions)
    merged_k[0][n_ctx:] = k0[n_ctx:]
    merged_v[0][n_ctx:] = v0[n_ctx:]

    if hooks is not None and hooks.choose_mask is not None:
        chosen = frozenset(int(i) for i in hooks.choose_mask(w, cfg, ctx, x))
        ctx.selection_mask = SelectionMask(spans=[(1, chosen)])
    mask = ctx.selection_mask.mask_at(1)
    _check_mask(mask, n_ctx)

    sel = np.fromiter(sorted(mask), dtype=np.int64, count=len(mask))
    merged_k[0][sel] = k0[sel]
    merged_v[0][sel] = v0[sel]
    active = np.concatenate([sel, query_idx])

    for li in range(1, cfg.n_layers):
        lw = w.layers[li]
        if hooks is not None and hooks.reselect is not None and li == hooks.reselect_layer:
            # Full-width pass of this layer over hybrid activations: recomputed
            # rows keep their propagated state, the rest use cached chunk
            # activations. The hook re-ranks from this pass's outputs.
            if li not in ctx.cached_activations:
                raise ConfigError(
                    f"re-selection at layer {li} requires cached activations at that layer"
                )
            x_full = np.concatenate([ctx.cached_activations[li], x[n_ctx:]]).astype(F32)
            x_full[sel] = x[sel]
            x_full, k_f, v_f, _ = _layer_full(lw, cfg, x_full, positions)
            new_mask = frozenset(int(i) for i in hooks.reselect(w, cfg, ctx, x_full, li))
            _check_mask(new_mask, n_ctx)
            ctx.selection_mask.spans.append((li, new_mask))
            mask = new_mask
            sel = np.fromiter(sorted(mask), dtype=np.int64, count=len(mask))
            active = np.concatenate([sel, query_idx])
            merged_k[li][active] = k_f[active]
            merged_v[li][active] = v_f[active]
            x = x_full
            continue

        x_act = x[active]
        q, k, v = _project_qkv(lw, cfg, x_act, positions[active])
        merged_k[li][active] = k
        merged_v[li][active] = v
        resh = ctx.reshaping
        local_rows = None
        scaled_cols = None
        if resh is not None:
            local_rows = active >= n_ctx
            scaled_cols = _context_bucket(n_total, n_ctx, mask if resh.exempt_selected else frozenset())
        x_new, _ = _attend_block(
            lw,
            cfg,
            x_act,
            q,
            merged_k[li],
            merged_v[li],
            positions[active],
            positions,
            reshaping=resh,
            local_rows=local_rows,
            scaled_cols=scaled_cols,
        )
        x[active] = x_new

    logits = _last_logits(w, cfg, x[-1:])
    final_mask = ctx.selection_mask.mask_at(cfg.n_layers)
    ctx.decode = DecodeState(
        layer_k=merged_k,
        layer_v=merged_v,
        n_total=n_total,
        n_ctx=n_ctx,
        reshaping=ctx.reshaping,
        exempt=final_mask if (ctx.reshaping is not None and ctx.reshaping.exempt_selected) else frozenset(),
        last_logits=logits,
    )
    return ctx, logits


def _check_mask(mask, n_ctx):
    for i in mask:
        if i < 0 or i >= n_ctx:
            raise ValueError(f"selection index {i} out of range for {n_ctx} context tokens")


def _context_bucket(n_keys: int, n_ctx: int, exempt: frozenset[int]) -> np.ndarray:
    cols = np.zeros(n_keys, dtype=bool)
    cols[:n_ctx] = True
    if exempt:
        cols[np.fromiter(exempt, dtype=np.int64, count=len(exempt))] = False
    return cols


def decode_state_from_prefill(res: PrefillResult, reshaping: Optional[Reshaping] = None) -> DecodeState:
    """Decode state for the no-reuse path: the whole prompt is the context."""
    n = int(res.layer_kv[0].k.shape[0])
    return DecodeState(
        layer_k=[kv.k.copy() for kv in res.layer_kv],
        layer_v=[kv.v.copy() for kv in res.layer_kv],
        n_total=n,
        n_ctx=0,
        reshaping=reshaping,
        exempt=frozenset(),
        last_logits=res.last_logits,
    )


@dataclass
class GenerationResult:
    token_ids: list[int]
    text: bytes
    logits_last_prefill: np.ndarray
    per_layer_kv_fingerprint: str
    stop_reason: str
    selection_trace: list[tuple[int, frozenset[int]]] = field(default_factory=list)


def decode_greedy(
    w: ModelWeights,
    cfg: ModelConfig,
    state: DecodeState,
    max_new_tokens: int,
    eos_id: int = EOS_ID,
) -> GenerationResult:
    """Argmax decoding appending K/V at the next positions.

    Argmax ties resolve to the lowest token id. Stops at eos_id or after
    max_new_tokens.
    """
    logits = state.last_logits
    first_logits = logits.copy()
    ids: list[int] = []
    stop_reason = "budget"
    for _ in range(max_new_tokens):
        tok = int(np.argmax(logits))
        if tok == eos_id:
            stop_reason = "eos"
            break
        ids.append(tok)
        pos = state.n_total
        if pos >= cfg.max_positions:
            raise ValueError(f"decode reached position {pos}, max is {cfg.max_positions}")
        x = w.embedding[np.array([tok])].astype(F32)
        q_pos = np.array([pos], dtype=np.int64)
        x = _decode_step(w, cfg, state, x, q_pos)
        state.n_total = pos + 1
        logits = _last_logits(w, cfg, x)
        state.last_logits = logits
    text = detokenize([t for t in ids if t < MIN_VOCAB])
    return GenerationResult(
        token_ids=ids,
        text=text,
        logits_last_prefill=first_logits,
        per_layer_kv_fingerprint=kv_fingerprint(state),
        stop_reason=stop_reason,
    )


def _decode_step(w, cfg, state, x, q_pos):
    n_keys_new = state.n_total + 1
    key_pos = np.arange(n_keys_new, dtype=np.int64)
    resh = state.reshaping
    scaled_cols = None
    local_rows = None
    if resh is not None:
        scaled_cols = _context_bucket(n_keys_new, state.n_ctx, state.exempt)
        local_rows = np.array([True])
    for li, lw in enumerate(w.layers):
        q, k, v = _project_qkv(lw, cfg, x, q_pos)
        state.layer_k[li] = np.concatenate([state.layer_k[li], k])
        state.layer_v[li] = np.concatenate([state.layer_v[li], v])
        # reshaping stays off at the full-width first layer, matching prefill
        use_resh = resh if li >= 1 else None
        x, _ = _attend_block(
            lw,
            cfg,
            x,
            q,
            state.layer_k[li],
            state.layer_v[li],
            q_pos,
            key_pos,
            reshaping=use_resh,
            local_rows=local_rows if use_resh is not None else None,
            scaled_cols=scaled_cols if use_resh is not None else None,
        )
    return x


def kv_fingerprint(state: DecodeState) -> str:
    h = hashlib.sha256()
    for k, v in zip(state.layer_k, state.layer_v):
        h.update(np.ascontiguousarray(k, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return h.hexdigest()


def prefill_kv_fingerprint(res: PrefillResult) -> str:
    h = hashlib.sha256()
    for kv in res.layer_kv:
        h.update(np.ascontiguousarray(kv.k, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(kv.v, dtype="<f4").tobytes())
    return h.hexdigest()
