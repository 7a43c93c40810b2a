"""Experiment orchestration: cache building, strategy matrix runs, the
selection analyses, and parameter-grid tuning.

All emitted CSV/JSON artifacts are byte-deterministic for a fixed config:
result rows are sorted before writing and floats are rendered with 6
significant digits, so reruns (and parallel runs) produce identical files.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cache import ChunkStore
from .dataset import DatasetItem, generate_synthetic, load_dataset
from .errors import ConfigError, DataError
from .metrics import (
    EvalRecord,
    EvalReport,
    cumulative_delta_k,
    f1,
    ideal_layer_selection,
    make_report,
    selection_overlap,
    sink_indices,
)
from .model import (
    EOS_ID,
    ModelConfig,
    ModelWeights,
    decode_state_from_prefill,
    decode_greedy,
    full_prefill,
    init_model,
    load_weights,
    tokenize,
    weights_fingerprint,
)
from .strategies import DEFAULT_R, StrategyConfig, run_strategy, strategy_from_dict

DEFAULT_MODEL = {"n_layers": 4, "n_heads": 4, "d_model": 64, "vocab_size": 259,
                 "rope_theta": 10000.0, "max_positions": 1024, "seed": 42}
DEFAULT_AUX_MODEL = {"n_layers": 2, "n_heads": 2, "d_model": 32, "vocab_size": 259,
                     "rope_theta": 10000.0, "max_positions": 1024, "seed": 7}


def fmt(x: float) -> str:
    """Render a real with 6 significant digits and a '.' decimal point."""
    return f"{x:.6g}"


@dataclass
class PromptTemplate:
    chunk_separator: str = ""
    question_prefix: str = ""
    question_suffix: str = "\n"

    def chunk_texts(self, item: DatasetItem) -> list[str]:
        if not self.chunk_separator:
            return list(item.chunks)
        # the separator is cached with the chunk it follows
        return [c + self.chunk_separator for c in item.chunks[:-1]] + [item.chunks[-1]]

    def query_text(self, item: DatasetItem) -> str:
        return self.question_prefix + item.question + self.question_suffix


@dataclass
class ExperimentConfig:
    raw: dict
    model_spec: dict
    aux_spec: dict
    cache_dir: Path
    dataset_spec: dict
    strategy_dicts: list[dict]
    out_dir: Path
    seed: int
    max_new_tokens: int
    prompt: PromptTemplate
    analysis: dict
    jobs: int = 1


def parse_config(raw: dict, base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Validate the experiment config; relative paths resolve against base_dir."""
    if not isinstance(raw, dict):
        raise ConfigError("experiment config must be a JSON object")
    base = Path(base_dir) if base_dir is not None else Path.cwd()

    def respath(p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else base / p

    model_spec = raw.get("model", dict(DEFAULT_MODEL))
    aux_spec = raw.get("aux_model", dict(DEFAULT_AUX_MODEL))
    if "cache_dir" not in raw:
        raise ConfigError("config needs a 'cache_dir'")
    dataset_spec = raw.get("dataset")
    if not dataset_spec or not ("path" in dataset_spec or "synthetic" in dataset_spec):
        raise ConfigError("config needs a 'dataset' with either 'path' or 'synthetic'")
    strategies = raw.get("strategies", [])
    if not isinstance(strategies, list):
        raise ConfigError("'strategies' must be a list")
    prompt = PromptTemplate(**raw.get("prompt", {}))
    max_new = int(raw.get("max_new_tokens", 16))
    if max_new < 0:
        raise ConfigError("max_new_tokens must be >= 0")
    analysis = dict(raw.get("analysis", {}))
    return ExperimentConfig(
        raw=raw,
        model_spec=model_spec,
        aux_spec=aux_spec,
        cache_dir=respath(raw["cache_dir"]),
        dataset_spec=dataset_spec,
        strategy_dicts=strategies,
        out_dir=respath(raw.get("out_dir", "out")),
        seed=int(raw.get("seed", 0)),
        max_new_tokens=max_new,
        prompt=prompt,
        analysis=analysis,
        jobs=max(1, int(raw.get("jobs", 1))),
    )


def load_config_file(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return parse_config(raw, base_dir=path.parent)


def model_from_spec(spec: dict) -> tuple[ModelWeights, ModelConfig]:
    if "path" in spec:
        return load_weights(spec["path"])
    fields = {k: v for k, v in spec.items() if k != "seed"}
    try:
        cfg = ModelConfig(**fields)
    except TypeError as exc:
        raise ConfigError(f"bad model spec: {exc}") from exc
    return init_model(cfg, int(spec.get("seed", 0))), cfg


def dataset_from_spec(spec: dict) -> list[DatasetItem]:
    if "path" in spec:
        return load_dataset(spec["path"])
    syn = spec["synthetic"]
    try:
        return generate_synthetic(
            n_items=int(syn["n_items"]),
            n_chunks=int(syn.get("n_chunks", 2)),
            chunk_len=int(syn.get("chunk_len", 64)),
            seed=int(syn.get("seed", 0)),
        )
    except KeyError as exc:
        raise ConfigError(f"synthetic dataset spec missing field {exc}") from exc


def expand_strategy_grid(d: dict) -> list[StrategyConfig]:
    """A list-valued parameter expands into one strategy point per value."""
    grid_keys = [k for k, v in d.items() if isinstance(v, list) and k != "components"]
    if not grid_keys:
        return [strategy_from_dict(d)]
    points = []
    for combo in itertools.product(*(d[k] for k in grid_keys)):
        point = dict(d)
        point.update(dict(zip(grid_keys, combo)))
        points.append(strategy_from_dict(point))
    return points


def expand_all_strategies(strategy_dicts: list[dict]) -> list[StrategyConfig]:
    """Grid-expand every entry; the full-prefill baseline always runs first."""
    points: list[StrategyConfig] = []
    for d in strategy_dicts:
        points.extend(expand_strategy_grid(d))
    baseline = StrategyConfig("full_prefill")
    points = [p for p in points if p.variant != "full_prefill"]
    return [baseline] + points


@dataclass
class RunResult:
    reports: list[tuple[StrategyConfig, EvalReport]]
    per_query_csv: Path
    aggregate_csv: Path
    manifest_path: Path
    cache_stats: dict
    records: list[EvalRecord] = field(default_factory=list)


def _prepare_caches(config, w, cfg, store, items, points):
    """Build (or fetch) every chunk cache the strategy points will need.

    Caches are keyed by (tokens, p); for each p the union of activation
    layers across strategies is built in one pass.
    """
    act_union: dict[int, set] = {}
    for pt in points:
        if pt.variant == "full_prefill":
            continue
        act_union.setdefault(pt.prefix_len, set()).update(pt.needed_activation_layers)
    caches = {}
    for item in items:
        chunk_tokens = [tokenize(t) for t in config.prompt.chunk_texts(item)]
        for p, acts in sorted(act_union.items()):
            caches[(item.id, p)] = [
                store.get_or_build(w, cfg, toks, prefix_len=p, activation_layers=sorted(acts))
                for toks in chunk_tokens
            ]
    return caches


def _run_baseline(config, w, cfg, item):
    chunk_tokens = [tokenize(t) for t in config.prompt.chunk_texts(item)]
    query = tokenize(config.prompt.query_text(item))
    tokens = [t for toks in chunk_tokens for t in toks] + query
    res = full_prefill(w, cfg, tokens)
    return decode_greedy(w, cfg, decode_state_from_prefill(res), config.max_new_tokens, EOS_ID)


def run_experiment(config: ExperimentConfig) -> RunResult:
    w, cfg = model_from_spec(config.model_spec)
    fingerprint = weights_fingerprint(w, cfg)
    items = dataset_from_spec(config.dataset_spec)
    points = expand_all_strategies(config.strategy_dicts)
    for pt in points:
        pt.validate_for_model(cfg)
    aux = None
    if any(pt.selector == "aux" for pt in points):
        aux = model_from_spec(config.aux_spec)

    store = ChunkStore.open(config.cache_dir, fingerprint)
    caches = _prepare_caches(config, w, cfg, store, items, points)

    def baseline_task(item):
        gen = _run_baseline(config, w, cfg, item)
        text = gen.text.decode("utf-8", "backslashreplace")
        return item.id, text, f1(text, item.answers)

    with ThreadPoolExecutor(max_workers=config.jobs) as pool:
        baseline = {qid: (text, score) for qid, text, score in pool.map(baseline_task, items)}

        def strategy_task(task):
            pt, item = task
            if pt.variant == "full_prefill":
                text, score = baseline[item.id]
            else:
                gen = run_strategy(
                    pt,
                    w,
                    cfg,
                    caches[(item.id, pt.prefix_len)],
                    tokenize(config.prompt.query_text(item)),
                    aux=aux,
                    max_new_tokens=config.max_new_tokens,
                )
                text = gen.text.decode("utf-8", "backslashreplace")
                score = f1(text, item.answers)
            return EvalRecord(
                query_id=item.id,
                strategy=pt.variant,
                params=pt.params_string(),
                prediction=text,
                gold_answers=item.answers,
                f1=score,
                baseline_f1=baseline[item.id][1],
            )

        tasks = [(pt, item) for pt in points for item in items]
        records = list(pool.map(strategy_task, tasks))

    records.sort(key=lambda r: (r.query_id, r.strategy, r.params))

    config.out_dir.mkdir(parents=True, exist_ok=True)
    per_query_csv = config.out_dir / "per_query.csv"
    with open(per_query_csv, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["query_id", "strategy", "params", "f1", "baseline_f1", "output"])
        for r in records:
            wr.writerow([r.query_id, r.strategy, r.params, fmt(r.f1), fmt(r.baseline_f1), r.prediction])

    reports = []
    aggregate_csv = config.out_dir / "aggregate.csv"
    with open(aggregate_csv, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["strategy", "params", "plain_f1", "adjusted_f1", "n_total", "n_baseline_nonzero"])
        for pt in points:
            sub = [r for r in records if r.strategy == pt.variant and r.params == pt.params_string()]
            report = make_report(sub)
            reports.append((pt, report))
            wr.writerow(
                [
                    pt.variant,
                    pt.params_string(),
                    fmt(report.plain_f1_mean),
                    fmt(report.adjusted_f1_mean) if report.adjusted_f1_mean is not None else "",
                    report.n_total,
                    report.n_baseline_nonzero,
                ]
            )

    manifest_path = config.out_dir / "manifest.json"
    manifest = {
        "model_fingerprint": fingerprint,
        "seeds": {
            "global": config.seed,
            "model": config.model_spec.get("seed"),
            "dataset": config.dataset_spec.get("synthetic", {}).get("seed"),
        },
        "n_items": len(items),
        "strategy_points": [
            {"strategy": pt.variant, "params": pt.params_string()} for pt in points
        ],
        "outputs": {"per_query": per_query_csv.name, "aggregate": aggregate_csv.name},
        "config": config.raw,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    # hit statistics vary between cold and warm runs, so they live with the
    # cache, not with the byte-stable run outputs
    stats = store.stats()
    (config.cache_dir / "last_run_stats.json").write_text(
        json.dumps(stats, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return RunResult(
        reports=reports,
        per_query_csv=per_query_csv,
        aggregate_csv=aggregate_csv,
        manifest_path=manifest_path,
        cache_stats=stats,
        records=records,
    )


def build_caches(config: ExperimentConfig) -> dict:
    """Just the cache-building phase of run_experiment."""
    w, cfg = model_from_spec(config.model_spec)
    store = ChunkStore.open(config.cache_dir, weights_fingerprint(w, cfg))
    items = dataset_from_spec(config.dataset_spec)
    points = expand_all_strategies(config.strategy_dicts)
    for pt in points:
        pt.validate_for_model(cfg)
    _prepare_caches(config, w, cfg, store, items, points)
    return store.stats()


# ---------------------------------------------------------------------------
# analyses


def _analysis_item(config, items) -> DatasetItem:
    qid = config.analysis.get("query_id")
    if qid is None:
        return items[0]
    for item in items:
        if item.id == qid:
            return item
    raise DataError(f"query {qid!r} not found in the dataset")


def _analysis_selection(config, w, cfg):
    items = dataset_from_spec(config.dataset_spec)
    item = _analysis_item(config, items)
    r = float(config.analysis.get("r", DEFAULT_R))
    p = int(config.analysis.get("p", 0))
    store = ChunkStore.open(config.cache_dir, weights_fingerprint(w, cfg))
    chunk_tokens = [tokenize(t) for t in config.prompt.chunk_texts(item)]
    chunks = [store.get_or_build(w, cfg, toks, prefix_len=p) for toks in chunk_tokens]
    query = tokenize(config.prompt.query_text(item))
    masks, scores = ideal_layer_selection(w, cfg, chunks, query, r)
    seg_lengths = [c.n_tokens for c in chunks]
    return item, masks, scores, seg_lengths


def analyze(kind: str, config: ExperimentConfig) -> Path:
    """Emit one analysis CSV: heatmap, overlap, or cumulative."""
    if kind not in ("heatmap", "overlap", "cumulative"):
        raise ConfigError(f"unknown analysis kind {kind!r}")
    w, cfg = model_from_spec(config.model_spec)
    item, masks, scores, seg_lengths = _analysis_selection(config, w, cfg)
    config.out_dir.mkdir(parents=True, exist_ok=True)
    out = config.out_dir / f"{kind}.csv"

    with open(out, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        if kind == "heatmap":
            ever = sorted(set().union(*masks.values())) if masks else []
            wr.writerow(["layer", "token_index", "selected"])
            for layer in sorted(masks):
                for tok in ever:
                    wr.writerow([layer, tok, 1 if tok in masks[layer] else 0])
        elif kind == "overlap":
            refs = config.analysis.get("reference_layers") or [1, cfg.n_layers - 1]
            wr.writerow(["reference_layer", "layer", "percent"])
            for ref in refs:
                if ref not in masks:
                    raise ConfigError(f"reference layer {ref} has no selection mask")
                overlaps = selection_overlap(masks, ref)
                if overlaps is None:
                    continue  # empty reference mask: undefined, reported absent
                for layer, pct in overlaps.items():
                    wr.writerow([ref, layer, fmt(pct)])
        else:
            layer = int(config.analysis.get("layer", 1))
            if layer not in scores:
                raise ConfigError(f"layer {layer} has no drift scores (valid: {sorted(scores)})")
            sc = scores[layer]
            wr.writerow(["rank", "cumulative_percent", "variant"])
            curve, _ = cumulative_delta_k(sc)
            for rank, pct in enumerate(curve, start=1):
                wr.writerow([rank, fmt(pct), "all"])
            sink = sink_indices(seg_lengths, first_n=10)
            if len(sink) < len(sc):
                curve_ns, _ = cumulative_delta_k(sc, exclude=sink)
                for rank, pct in enumerate(curve_ns, start=1):
                    wr.writerow([rank, fmt(pct), "no_sink"])
    return out


# ---------------------------------------------------------------------------
# tuning


def _split_hash(query_id: str) -> int:
    return int(hashlib.sha256(query_id.encode("utf-8")).hexdigest(), 16)


def heldout_split(items: list[DatasetItem]) -> list[DatasetItem]:
    """Deterministic held-out half: odd sha256 of the query id."""
    return [it for it in items if _split_hash(it.id) % 2 == 1]


def tune(config: ExperimentConfig) -> tuple[dict, Path]:
    """Exhaustive grid evaluation on the held-out split.

    Picks max adjusted F1 per strategy variant (plain F1 when the adjusted
    subset is empty); ties prefer smaller p, then t closest to 1, then s
    closest to 1.
    """
    w, cfg = model_from_spec(config.model_spec)
    fingerprint = weights_fingerprint(w, cfg)
    items = heldout_split(dataset_from_spec(config.dataset_spec))
    if not items:
        raise DataError("held-out split is empty; need more dataset items")
    points = expand_all_strategies(config.strategy_dicts)
    for pt in points:
        pt.validate_for_model(cfg)
    aux = model_from_spec(config.aux_spec) if any(p.selector == "aux" for p in points) else None
    store = ChunkStore.open(config.cache_dir, fingerprint)
    caches = _prepare_caches(config, w, cfg, store, items, points)

    baseline = {}
    for item in items:
        gen = _run_baseline(config, w, cfg, item)
        text = gen.text.decode("utf-8", "backslashreplace")
        baseline[item.id] = (text, f1(text, item.answers))

    rows = []
    for pt in points:
        records = []
        for item in items:
            if pt.variant == "full_prefill":
                text, score = baseline[item.id]
            else:
                gen = run_strategy(
                    pt, w, cfg, caches[(item.id, pt.prefix_len)],
                    tokenize(config.prompt.query_text(item)),
                    aux=aux, max_new_tokens=config.max_new_tokens,
                )
                text = gen.text.decode("utf-8", "backslashreplace")
                score = f1(text, item.answers)
            records.append(
                EvalRecord(
                    query_id=item.id, strategy=pt.variant, params=pt.params_string(),
                    prediction=text, gold_answers=item.answers,
                    f1=score, baseline_f1=baseline[item.id][1],
                )
            )
        report = make_report(records)
        rows.append((pt, report))

    best: dict[str, dict] = {}
    for pt, report in rows:
        objective = report.adjusted_f1_mean if report.adjusted_f1_mean is not None else report.plain_f1_mean
        key = (-objective, pt.p, abs(pt.t - 1.0), abs(pt.s - 1.0), pt.r)
        entry = best.get(pt.variant)
        if entry is None or key < entry["key"]:
            best[pt.variant] = {
                "key": key,
                "params": pt.params_string(),
                "objective": objective,
                "plain_f1": report.plain_f1_mean,
                "adjusted_f1": report.adjusted_f1_mean,
            }

    config.out_dir.mkdir(parents=True, exist_ok=True)
    out = config.out_dir / "tuning.csv"
    with open(out, "w", encoding="utf-8", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["strategy", "params", "plain_f1", "adjusted_f1", "n_total", "n_baseline_nonzero", "best"])
        for pt, report in rows:
            is_best = best[pt.variant]["params"] == pt.params_string()
            wr.writerow(
                [
                    pt.variant,
                    pt.params_string(),
                    fmt(report.plain_f1_mean),
                    fmt(report.adjusted_f1_mean) if report.adjusted_f1_mean is not None else "",
                    report.n_total,
                    report.n_baseline_nonzero,
                    1 if is_best else 0,
                ]
            )
    result = {
        variant: {k: v for k, v in entry.items() if k != "key"} for variant, entry in sorted(best.items())
    }
    (config.out_dir / "best_params.json").write_text(
        json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return result, out
