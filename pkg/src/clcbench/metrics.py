"""Answer scoring and per-layer selection analyses.

F1 is token-bag precision/recall against each gold answer, taking the
maximum. The adjusted mean restricts to queries where the full-prefill
baseline scored above zero, so reuse strategies are judged only where the
model could answer at all.
"""

from __future__ import annotations

import re
import string
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cache import ChunkCache, assemble
from .model import ModelConfig, ModelWeights, full_prefill, project_key
from .strategies import delta_k, select_top_r

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> list[str]:
    """Lowercase, strip punctuation, drop articles, split on whitespace."""
    text = text.lower().translate(_PUNCT_TABLE)
    text = _ARTICLE_RE.sub(" ", text)
    return text.split()


def _bag_tokens(text: str) -> list[str]:
    # f1 keeps articles: scoring counts every surface token
    return text.lower().translate(_PUNCT_TABLE).split()


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens and not gold_tokens:
        return 1.0
    if not pred_tokens or not gold_tokens:
        return 0.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    n_same = sum(common.values())
    if n_same == 0:
        return 0.0
    precision = n_same / len(pred_tokens)
    recall = n_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: str, gold_answers: list[str]) -> float:
    """Best token-bag F1 of the prediction against any gold answer."""
    pred_tokens = _bag_tokens(prediction)
    if not gold_answers:
        return 1.0 if not pred_tokens else 0.0
    return max(_f1_single(pred_tokens, _bag_tokens(g)) for g in gold_answers)


@dataclass
class EvalRecord:
    query_id: str
    strategy: str
    params: str
    prediction: str
    gold_answers: list[str]
    f1: float
    baseline_f1: float


@dataclass
class EvalReport:
    records: list[EvalRecord]
    plain_f1_mean: float
    adjusted_f1_mean: Optional[float]
    n_total: int
    n_baseline_nonzero: int


def adjusted_f1(records: list[EvalRecord]) -> tuple[float, Optional[float], int, int]:
    """(plain mean, adjusted mean over baseline>0 records or None, counts)."""
    n_total = len(records)
    if n_total == 0:
        return 0.0, None, 0, 0
    plain = sum(r.f1 for r in records) / n_total
    nonzero = [r for r in records if r.baseline_f1 > 0]
    adjusted = sum(r.f1 for r in nonzero) / len(nonzero) if nonzero else None
    return plain, adjusted, n_total, len(nonzero)


def make_report(records: list[EvalRecord]) -> EvalReport:
    plain, adjusted, n_total, n_nonzero = adjusted_f1(records)
    return EvalReport(
        records=records,
        plain_f1_mean=plain,
        adjusted_f1_mean=adjusted,
        n_total=n_total,
        n_baseline_nonzero=n_nonzero,
    )


# ---------------------------------------------------------------------------
# per-layer selection analyses


def ideal_layer_selection(
    w: ModelWeights,
    cfg: ModelConfig,
    chunks: list[ChunkCache],
    query_tokens,
    r: float,
) -> tuple[dict[int, frozenset[int]], dict[int, np.ndarray]]:
    """Per-layer recomputation sets assuming a full prefill up to each layer.

    For every layer past the first, project that layer's keys from the full
    prefill's layer inputs and rank context tokens by drift against the
    cached (re-rotated) keys. Returns ({layer: mask}, {layer: scores}).
    """
    ctx = assemble(chunks, query_tokens, cfg)
    n_ctx = ctx.n_ctx
    tokens = np.concatenate([ctx.context_tokens, ctx.query_tokens])
    res = full_prefill(w, cfg, tokens, capture_layer_inputs=True)
    positions = np.arange(n_ctx)
    masks: dict[int, frozenset[int]] = {}
    scores: dict[int, np.ndarray] = {}
    for layer in range(1, cfg.n_layers):
        k = project_key(w, cfg, layer, res.layer_inputs[layer][:n_ctx], positions)
        sc = delta_k(k, ctx.layer_k[layer])
        scores[layer] = sc
        masks[layer] = select_top_r(sc, r)
    return masks, scores


def selection_overlap(
    masks: dict[int, frozenset[int]], reference_layer: int
) -> Optional[dict[int, float]]:
    """Percent of the reference layer's mask also chosen at each layer.

    Returns None when the reference mask is empty (overlap undefined).
    """
    ref = masks[reference_layer]
    if not ref:
        return None
    return {layer: 100.0 * len(ref & m) / len(ref) for layer, m in sorted(masks.items())}


def cumulative_delta_k(scores, exclude=()) -> tuple[np.ndarray, bool]:
    """Cumulative percentage curve of scores sorted descending.

    exclude drops the given indices first (used to strip per-chunk sink
    tokens). Returns (curve, degenerate); an all-zero total yields a flat
    zero curve flagged degenerate.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape[0] == 0:
        raise ValueError("cumulative_delta_k needs at least one score")
    if exclude:
        keep = np.ones(scores.shape[0], dtype=bool)
        keep[np.asarray(sorted(exclude), dtype=np.int64)] = False
        scores = scores[keep]
        if scores.shape[0] == 0:
            raise ValueError("all scores were excluded")
    ordered = np.sort(scores)[::-1]
    total = ordered.sum()
    if total <= 0.0:
        return np.zeros(ordered.shape[0]), True
    return 100.0 * np.cumsum(ordered) / total, False


def sink_indices(segment_lengths, first_n: int = 10) -> frozenset[int]:
    """Global indices of the first `first_n` tokens of each chunk."""
    out = []
    start = 0
    for length in segment_lengths:
        out.extend(range(start, start + min(first_n, length)))
        start += length
    return frozenset(out)
