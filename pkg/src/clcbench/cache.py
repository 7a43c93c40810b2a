"""Content-addressed chunk cache store and serving-time context assembly.

Chunk caches hold per-layer K/V built in isolation at base positions
0..n-1 (optionally with a discarded blank prefix, which absorbs sink
attention). Assembly re-rotates each chunk's K to its global offset via
rotation additivity and appends the query tokens.

On-disk layout: one "CLCC" file per chunk named by its hex id, plus a
manifest.json listing (chunk_id, token count, prefix_len) for one model
fingerprint.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    ChunkNotFoundError,
    FingerprintMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .model import (
    AssembledContext,
    LayerKV,
    ModelConfig,
    ModelWeights,
    _config_pack,
    full_prefill,
    weights_fingerprint,
    SPACE_ID,
)
from .tensor_ops import rope_shift

F32 = np.float32

CHUNK_MAGIC = b"CLCC"
CHUNK_VERSION = 1
KEY_VERSION = 1


@dataclass
class ChunkCache:
    chunk_id: str
    tokens: np.ndarray  # [n] int64
    per_layer: list[LayerKV]  # K/V based at positions 0..n-1
    prefix_len: int
    model_fingerprint: str
    activations: dict[int, np.ndarray] = field(default_factory=dict)  # layer -> [n, d]

    @property
    def n_tokens(self) -> int:
        return int(self.tokens.shape[0])


def cache_key(tokens, prefix_len: int, model_fingerprint: str, config: ModelConfig) -> str:
    """Stable content hash over (tokens, prefix length, model, config)."""
    ids = np.asarray(list(tokens), dtype=np.uint32)
    h = hashlib.sha256()
    h.update(b"CLCK")
    h.update(struct.pack("<I", KEY_VERSION))
    h.update(bytes.fromhex(model_fingerprint))
    h.update(_config_pack(config))
    h.update(struct.pack("<II", prefix_len, ids.shape[0]))
    h.update(ids.astype("<u4").tobytes())
    return h.hexdigest()


def build_chunk_cache(
    w: ModelWeights,
    cfg: ModelConfig,
    chunk_tokens,
    prefix_len: int = 0,
    activation_layers=(),
) -> ChunkCache:
    """Prefill the chunk in isolation and re-base it to positions 0..n-1.

    prefix_len blank-space tokens are prepended for the prefill and then
    dropped; the retained K rows are rotated back by -prefix_len so the
    cache is always based at position 0. Layer-input activations are kept
    for the requested layers (needed by re-selection strategies).
    """
    ids = np.asarray(list(chunk_tokens), dtype=np.int64)
    if ids.shape[0] < 1:
        raise ValueError("chunk must contain at least one token")
    if prefix_len < 0:
        raise ValueError(f"prefix_len must be >= 0, got {prefix_len}")
    act_layers = sorted(set(int(a) for a in activation_layers))
    for a in act_layers:
        if a < 0 or a >= cfg.n_layers:
            raise ValueError(f"activation layer {a} out of range for {cfg.n_layers} layers")
    p = prefix_len
    full = np.concatenate([np.full(p, SPACE_ID, dtype=np.int64), ids])
    res = full_prefill(w, cfg, full, capture_layer_inputs=bool(act_layers))
    n = ids.shape[0]
    base_pos = np.arange(n, dtype=np.int64)
    per_layer = []
    for kv in res.layer_kv:
        k = rope_shift(kv.k[p:], -p, cfg.rope)
        per_layer.append(LayerKV(k=k, v=kv.v[p:].copy(), positions=base_pos.copy()))
    activations = {a: res.layer_inputs[a][p:].copy() for a in act_layers}
    fp = weights_fingerprint(w, cfg)
    return ChunkCache(
        chunk_id=cache_key(ids, p, fp, cfg),
        tokens=ids,
        per_layer=per_layer,
        prefix_len=p,
        model_fingerprint=fp,
        activations=activations,
    )


def assemble(chunks: list[ChunkCache], query_tokens, cfg: ModelConfig) -> AssembledContext:
    """Stitch chunk caches at consecutive offsets and append the query.

    Chunk i's K is re-rotated by its global start offset; V is copied
    unshifted. The result has an empty selection mask and no reshaping.
    """
    if not chunks:
        raise ValueError("assemble needs at least one chunk")
    fp = chunks[0].model_fingerprint
    for c in chunks:
        if c.model_fingerprint != fp:
            raise FingerprintMismatchError("chunks were built against different models")
    q_ids = np.asarray(list(query_tokens), dtype=np.int64)
    lengths = [c.n_tokens for c in chunks]
    n_ctx = sum(lengths)
    total = n_ctx + q_ids.shape[0]
    if total > cfg.max_positions:
        raise ValueError(f"assembled context of {total} tokens exceeds max_positions {cfg.max_positions}")

    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]]).astype(int)
    segments = [(c.chunk_id, int(s)) for c, s in zip(chunks, starts)]

    layer_k = []
    layer_v = []
    for li in range(cfg.n_layers):
        ks = [rope_shift(c.per_layer[li].k, int(s), cfg.rope) for c, s in zip(chunks, starts)]
        vs = [c.per_layer[li].v.copy() for c in chunks]
        layer_k.append(np.concatenate(ks) if len(ks) > 1 else ks[0])
        layer_v.append(np.concatenate(vs) if len(vs) > 1 else vs[0])

    shared_act_layers = set(chunks[0].activations)
    for c in chunks[1:]:
        shared_act_layers &= set(c.activations)
    cached_activations = {
        li: np.concatenate([c.activations[li] for c in chunks]) if len(chunks) > 1 else chunks[0].activations[li].copy()
        for li in sorted(shared_act_layers)
    }

    prefix_lens = {c.prefix_len for c in chunks}
    return AssembledContext(
        segments=segments,
        segment_lengths=lengths,
        context_tokens=np.concatenate([c.tokens for c in chunks]),
        query_tokens=q_ids,
        layer_k=layer_k,
        layer_v=layer_v,
        cached_activations=cached_activations,
        prefix_len=prefix_lens.pop() if len(prefix_lens) == 1 else -1,
    )


class ChunkStore:
    """Disk-backed chunk cache keyed by content hash, bound to one model.

    Reads are cached in memory; concurrent readers are safe because stored
    caches are never mutated. put() counts a hit when the id is already
    present, so a fully warmed store reports a 100% hit rate.
    """

    def __init__(self, directory, model_fingerprint: str):
        self.dir = Path(directory)
        self.fingerprint = model_fingerprint
        self.hits = 0
        self.misses = 0
        self._mem: dict[str, ChunkCache] = {}
        self.dir.mkdir(parents=True, exist_ok=True)
        manifest = self._manifest_path()
        if manifest.exists():
            meta = json.loads(manifest.read_text())
            if meta.get("model_fingerprint") != model_fingerprint:
                raise FingerprintMismatchError(
                    f"store at {self.dir} was built for model {meta.get('model_fingerprint')}"
                )
            self._entries = meta.get("chunks", {})
        else:
            self._entries = {}
            self._write_manifest()

    @classmethod
    def open(cls, directory, model_fingerprint: str) -> "ChunkStore":
        return cls(directory, model_fingerprint)

    def _manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    def _write_manifest(self) -> None:
        payload = {
            "format": "CLCC",
            "version": CHUNK_VERSION,
            "model_fingerprint": self.fingerprint,
            "chunks": {k: self._entries[k] for k in sorted(self._entries)},
        }
        self._manifest_path().write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def __contains__(self, chunk_id: str) -> bool:
        return chunk_id in self._entries

    def put(self, cache: ChunkCache) -> None:
        if cache.model_fingerprint != self.fingerprint:
            raise FingerprintMismatchError("chunk cache fingerprint does not match the store")
        if cache.chunk_id in self._entries:
            return
        _write_chunk_file(self.dir / f"{cache.chunk_id}.clcc", cache)
        self._entries[cache.chunk_id] = {
            "n_tokens": cache.n_tokens,
            "prefix_len": cache.prefix_len,
            "activation_layers": sorted(cache.activations),
        }
        self._write_manifest()
        self._mem[cache.chunk_id] = cache

    def get(self, chunk_id: str) -> ChunkCache:
        if chunk_id in self._mem:
            return self._mem[chunk_id]
        if chunk_id not in self._entries:
            raise ChunkNotFoundError(f"chunk {chunk_id} not found in {self.dir}")
        cache = _read_chunk_file(self.dir / f"{chunk_id}.clcc")
        if cache.model_fingerprint != self.fingerprint:
            raise FingerprintMismatchError(f"chunk {chunk_id} belongs to a different model")
        self._mem[chunk_id] = cache
        return cache

    def get_or_build(self, w, cfg, chunk_tokens, prefix_len=0, activation_layers=()) -> ChunkCache:
        """Fetch by content key, building and persisting on a miss.

        An existing entry missing some requested activation layers counts
        as a miss and is rebuilt with the union of layers.
        """
        cid = cache_key(chunk_tokens, prefix_len, self.fingerprint, cfg)
        want = set(int(a) for a in activation_layers)
        if cid in self._entries:
            have = set(self._entries[cid].get("activation_layers", []))
            if want <= have:
                self.hits += 1
                return self.get(cid)
            want |= have
        self.misses += 1
        cache = build_chunk_cache(w, cfg, chunk_tokens, prefix_len, sorted(want))
        self._entries.pop(cid, None)
        self._mem.pop(cid, None)
        self.put(cache)
        return cache

    def stats(self) -> dict:
        total = self.hits + self.misses
        return {
            "hits": self.hits,
            "misses": self.misses,
            "hit_rate": (self.hits / total) if total else None,
        }


def _write_chunk_file(path: Path, cache: ChunkCache) -> None:
    kv0 = cache.per_layer[0]
    n, n_heads, d_head = kv0.k.shape
    n_layers = len(cache.per_layer)
    d_model = cache.activations[next(iter(cache.activations))].shape[1] if cache.activations else 0
    act_layers = sorted(cache.activations)
    with open(path, "wb") as f:
        f.write(CHUNK_MAGIC)
        f.write(struct.pack("<I", CHUNK_VERSION))
        f.write(bytes.fromhex(cache.chunk_id))
        f.write(bytes.fromhex(cache.model_fingerprint))
        f.write(
            struct.pack(
                "<IIIIIII",
                cache.prefix_len,
                n,
                n_layers,
                n_heads,
                d_head,
                d_model,
                len(act_layers),
            )
        )
        for a in act_layers:
            f.write(struct.pack("<I", a))
        f.write(cache.tokens.astype("<u4").tobytes())
        for kv in cache.per_layer:
            f.write(np.ascontiguousarray(kv.k, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(kv.v, dtype="<f4").tobytes())
        for a in act_layers:
            f.write(np.ascontiguousarray(cache.activations[a], dtype="<f4").tobytes())


def _read_chunk_file(path: Path) -> ChunkCache:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHUNK_MAGIC:
            raise BadMagicError(f"expected magic {CHUNK_MAGIC!r}, got {magic!r}")
        raw = f.read(4)
        if len(raw) < 4:
            raise TruncatedFileError("chunk file ends inside the version field", "version")
        (version,) = struct.unpack("<I", raw)
        if version != CHUNK_VERSION:
            raise VersionMismatchError(f"unsupported chunk format version {version}")
        chunk_id = f.read(32).hex()
        fingerprint = f.read(32).hex()
        hdr_fmt = "<IIIIIII"
        hdr = f.read(struct.calcsize(hdr_fmt))
        if len(hdr) < struct.calcsize(hdr_fmt):
            raise TruncatedFileError("chunk file ends inside the header", "header")
        prefix_len, n, n_layers, n_heads, d_head, d_model, n_act = struct.unpack(hdr_fmt, hdr)
        act_layers = [struct.unpack("<I", f.read(4))[0] for _ in range(n_act)]

        def read_block(name, shape):
            nbytes = int(np.prod(shape)) * 4
            buf = f.read(nbytes)
            if len(buf) < nbytes:
                raise TruncatedFileError(f"chunk file truncated while reading {name}", name)
            return buf

        tokens = np.frombuffer(read_block("tokens", (n,)), dtype="<u4").astype(np.int64)
        base_pos = np.arange(n, dtype=np.int64)
        per_layer = []
        for li in range(n_layers):
            k = np.frombuffer(read_block(f"layers.{li}.k", (n, n_heads, d_head)), dtype="<f4")
            v = np.frombuffer(read_block(f"layers.{li}.v", (n, n_heads, d_head)), dtype="<f4")
            per_layer.append(
                LayerKV(
                    k=k.reshape(n, n_heads, d_head).astype(F32),
                    v=v.reshape(n, n_heads, d_head).astype(F32),
                    positions=base_pos.copy(),
                )
            )
        activations = {}
        for a in act_layers:
            buf = np.frombuffer(read_block(f"activations.{a}", (n, d_model)), dtype="<f4")
            activations[a] = buf.reshape(n, d_model).astype(F32)
    return ChunkCache(
        chunk_id=chunk_id,
        tokens=tokens,
        per_layer=per_layer,
        prefix_len=prefix_len,
        model_fingerprint=fingerprint,
        activations=activations,
    )
