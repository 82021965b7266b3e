"""Figures written next to the CLI's JSON output.

Uses ``matplotlib.figure.Figure`` directly (no pyplot state), so rendering
works headless and from any thread.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np
from matplotlib.figure import Figure

from .analyzers import FocusResult, RelevanceResult, SelectiveAttention, SpanPair, compute_attention_from_qk
from .config import HeadRef
from .formats import QKCapture

PathLike = Union[str, Path]

_SPAN_COLORS = {"instruction": "tab:green", "query": "tab:red", "document": "tab:blue"}


def _save(fig: Figure, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    return path


def _shade(ax, spans: Mapping[str, Sequence[int]]) -> None:
    # colored band above the axes plus edge lines, so spans stay visible over any heatmap
    band = ax.get_xaxis_transform()
    for label, (start, end) in spans.items():
        color = _SPAN_COLORS.get(label, "0.5")
        ax.fill_between([start - 0.5, end - 0.5], 1.01, 1.05, transform=band, color=color, clip_on=False, label=label)
        for x in (start - 0.5, end - 0.5):
            ax.axvline(x, color=color, lw=1.2)


def _heatmap(ax, rows: np.ndarray, labels: Sequence[str], title: str) -> None:
    im = ax.imshow(rows, aspect="auto", cmap="viridis", interpolation="nearest", vmin=0.0)
    ax.set_yticks(range(len(labels)))
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_xlabel("key position")
    ax.set_title(title, fontsize=9, pad=14)
    ax.figure.colorbar(im, ax=ax, fraction=0.03, pad=0.02)


def plot_focus(
    result: FocusResult,
    attn: SelectiveAttention,
    spans: SpanPair,
    path: PathLike,
    threshold: Optional[float] = None,
) -> Path:
    """Per-head focus scores and the last-token attention rows they came from."""
    heads = list(result.per_head_scores)
    fig = Figure(figsize=(9, 3 + 0.15 * len(heads)))
    ax_bar, ax_map = fig.subplots(1, 2, gridspec_kw={"width_ratios": [1, 2]})

    ax_bar.barh(range(len(heads)), [result.per_head_scores[h] for h in heads], color="tab:gray")
    ax_bar.set_yticks(range(len(heads)))
    ax_bar.set_yticklabels([str(h) for h in heads], fontsize=7)
    ax_bar.invert_yaxis()
    ax_bar.set_xlim(0, 1)
    ax_bar.axvline(result.score, color="k", lw=1, label=f"score {result.score:.3f}")
    if threshold is not None:
        ax_bar.axvline(threshold, color="tab:red", ls="--", lw=1, label=f"threshold {threshold:g}")
    ax_bar.set_xlabel("focus score")
    ax_bar.legend(fontsize=7, loc="lower right")

    rows = np.stack([attn[h][-1] for h in heads])
    _heatmap(ax_map, rows, [str(h) for h in heads], f"last-token attention ({result.verdict})")
    _shade(ax_map, {"instruction": spans.instruction, "query": spans.query})
    ax_map.legend(fontsize=7, loc="upper right", framealpha=0.9)
    return _save(fig, path)


def plot_relevance(result: RelevanceResult, path: PathLike, labels: Optional[Sequence[str]] = None) -> Path:
    n = len(result.scores)
    labels = list(labels) if labels is not None else [f"doc {i}" for i in range(n)]
    order = result.ranking
    fig = Figure(figsize=(6, 1.2 + 0.35 * n))
    ax = fig.subplots()
    ax.barh(range(n), [result.scores[i] for i in order], color="tab:blue")
    ax.set_yticks(range(n))
    ax.set_yticklabels([labels[i] for i in order], fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("document attention mass (mean over heads)")
    ax.set_title("relevance ranking", fontsize=9)
    return _save(fig, path)


def plot_capture(capture: QKCapture, path: PathLike, batch: int = 0) -> Path:
    """Head-averaged last-query attention of every captured module."""
    entries = sorted((e for e in capture.entries if e.batch == batch), key=lambda e: e.layer_num)
    if not entries:
        raise ValueError(f"capture has no entries for batch item {batch}")
    t = max(e.k_all.shape[0] for e in entries)
    rows = np.zeros((len(entries), t))
    for i, e in enumerate(entries):
        heads = [HeadRef(e.layer_num, h) for h in range(e.k_all.shape[1])]
        attn = compute_attention_from_qk(capture, heads, batch)
        rows[i, : e.k_all.shape[0]] = np.mean([attn[h][-1] for h in heads], axis=0)
    fig = Figure(figsize=(8, 1.5 + 0.3 * len(entries)))
    _heatmap(fig.subplots(), rows, [e.name for e in entries], f"run {capture.run_id}")
    return _save(fig, path)
