"""Render clcbench CSV artifacts as figures.

Four figure kinds mirror the benchmark analyses: the selection heatmap
(black = token selected at that layer, white = not), per-layer selection
overlap, cumulative key-drift curves, and grouped F1 bars. Inputs are
never modified; regenerating from unchanged CSVs yields an image with
identical dimensions and layout.

All styling defaults live in STYLE below.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("heatmap", "overlap", "cumulative", "f1-bars")

REQUIRED_COLUMNS = {
    "heatmap": ("layer", "token_index", "selected"),
    "overlap": ("reference_layer", "layer", "percent"),
    "cumulative": ("rank", "cumulative_percent", "variant"),
    "f1-bars": ("strategy", "params", "plain_f1", "adjusted_f1"),
}

STYLE = {
    "figsize": (7.0, 4.2),
    "dpi": 120,
    "grid_alpha": 0.3,
    "bar_width": 0.38,
    "heatmap_cmap": "gray_r",  # 1 -> black (selected), 0 -> white
}


class SchemaError(Exception):
    """Input CSV does not match the expected column contract."""

    def __init__(self, message: str, column: str = ""):
        super().__init__(message)
        self.column = column


def read_rows(csv_path, kind: str) -> list[dict]:
    if kind not in KINDS:
        raise ValueError(f"unknown figure kind {kind!r} (expected one of {KINDS})")
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for column in REQUIRED_COLUMNS[kind]:
            if column not in header:
                raise SchemaError(
                    f"{csv_path}: missing required column '{column}' for kind {kind!r}",
                    column=column,
                )
        rows = list(reader)
    if not rows:
        raise ValueError(f"{csv_path} has no data rows")
    return rows


def render(kind: str, csv_path, out_path, title: str | None = None) -> Path:
    """Render one figure kind from its CSV and write the image file."""
    rows = read_rows(csv_path, kind)
    fig, ax = plt.subplots(figsize=STYLE["figsize"], dpi=STYLE["dpi"])
    try:
        if kind == "heatmap":
            _draw_heatmap(ax, rows)
        elif kind == "overlap":
            _draw_overlap(ax, rows)
        elif kind == "cumulative":
            _draw_cumulative(ax, rows)
        else:
            _draw_f1_bars(ax, rows)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        out_path = Path(out_path)
        fig.savefig(out_path)
    finally:
        plt.close(fig)
    return out_path


def _draw_heatmap(ax, rows):
    layers = sorted({int(r["layer"]) for r in rows})
    tokens = sorted({int(r["token_index"]) for r in rows})
    layer_pos = {v: i for i, v in enumerate(layers)}
    token_pos = {v: i for i, v in enumerate(tokens)}
    grid = np.zeros((len(layers), len(tokens)))
    for r in rows:
        grid[layer_pos[int(r["layer"])], token_pos[int(r["token_index"])]] = float(r["selected"])
    ax.imshow(grid, cmap=STYLE["heatmap_cmap"], vmin=0.0, vmax=1.0, aspect="auto", interpolation="nearest")
    ax.set_xlabel("token index")
    ax.set_ylabel("layer")
    ax.set_yticks(range(len(layers)), [str(v) for v in layers])
    step = max(1, len(tokens) // 16)
    ax.set_xticks(range(0, len(tokens), step), [str(tokens[i]) for i in range(0, len(tokens), step)])


def _draw_overlap(ax, rows):
    refs = sorted({int(r["reference_layer"]) for r in rows})
    for ref in refs:
        pts = sorted(
            ((int(r["layer"]), float(r["percent"])) for r in rows if int(r["reference_layer"]) == ref)
        )
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=f"reference layer {ref}")
    ax.set_xlabel("layer")
    ax.set_ylabel("overlap with reference selection (%)")
    ax.set_ylim(0, 105)
    ax.grid(alpha=STYLE["grid_alpha"])
    ax.legend()


def _draw_cumulative(ax, rows):
    variants = sorted({r["variant"] for r in rows})
    for variant in variants:
        pts = sorted(
            ((int(r["rank"]), float(r["cumulative_percent"])) for r in rows if r["variant"] == variant)
        )
        ax.plot([p[0] for p in pts], [p[1] for p in pts], label=variant)
    ax.set_xlabel("tokens, sorted by key drift (rank)")
    ax.set_ylabel("cumulative drift (%)")
    ax.set_ylim(0, 105)
    ax.grid(alpha=STYLE["grid_alpha"])
    ax.legend()


def _draw_f1_bars(ax, rows):
    labels = []
    plain = []
    adjusted = []
    for r in rows:
        label = r["strategy"] if not r["params"] else f"{r['strategy']}\n{r['params']}"
        labels.append(label)
        plain.append(float(r["plain_f1"]))
        # adjusted is absent when no query had a non-zero baseline
        adjusted.append(float(r["adjusted_f1"]) if r["adjusted_f1"] != "" else np.nan)
    x = np.arange(len(labels))
    width = STYLE["bar_width"]
    ax.bar(x - width / 2, plain, width, label="plain F1")
    ax.bar(x + width / 2, adjusted, width, label="adjusted F1")
    ax.set_xticks(x, labels, rotation=30, ha="right", fontsize=7)
    ax.set_ylabel("F1")
    ax.set_ylim(0, 1.05)
    ax.grid(axis="y", alpha=STYLE["grid_alpha"])
    ax.legend()
