"""Recompute selective attention from saved Q/K and score it.

* focus score (prompt-injection monitoring): instruction-span attention mass
  over instruction-plus-query mass, averaged over the important heads
* document relevance (reranking): document-span attention mass of the last
  prompt token, averaged over heads
* steering vectors: mean residual difference between two prompt sets
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence, Union

import numpy as np

from .config import HeadRef
from .formats import FormatError, QKCapture, read_qkc
from .runtime import KVCache, Model, attention_reference, forward, tokenize
from .worker import HookManager, cache_path

log = logging.getLogger(__name__)

ATTN_FUNCS = ("sum_normalize",)


class CacheNotFoundError(FileNotFoundError):
    pass


class AnalysisError(ValueError):
    pass


class Span(NamedTuple):
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start


class SpanPair(NamedTuple):
    instruction: Span
    query: Span

    @classmethod
    def of(cls, instruction: Sequence[int], query: Sequence[int]) -> "SpanPair":
        return cls(Span(*instruction), Span(*query))

    def check(self, length: int) -> None:
        for label, span in (("instruction", self.instruction), ("query", self.query)):
            if not 0 <= span.start < span.end <= length:
                raise AnalysisError(f"{label} span {tuple(span)} invalid for context of length {length}")
        a, b = self.instruction, self.query
        if a.start < b.end and b.start < a.end:
            raise AnalysisError(f"instruction span {tuple(a)} overlaps query span {tuple(b)}")


def parse_input_range(text: str) -> SpanPair:
    """``"is,ie:qs,qe"`` -> SpanPair of half-open token ranges."""
    try:
        inst, query = text.split(":")
        return SpanPair.of(
            [int(v) for v in inst.split(",")], [int(v) for v in query.split(",")]
        )
    except (ValueError, TypeError):
        raise AnalysisError(f"input range must look like 'is,ie:qs,qe', got {text!r}") from None


@dataclass
class AnalyzerSpec:
    input_range: list[SpanPair] = field(default_factory=list)
    attn_func: str = "sum_normalize"
    head_profile: list[HeadRef] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.attn_func not in ATTN_FUNCS:
            raise AnalysisError(f"unknown attn_func {self.attn_func!r}; expected one of {ATTN_FUNCS}")
        self.input_range = [
            r if isinstance(r, SpanPair) else SpanPair.of(*r) for r in self.input_range
        ]
        self.head_profile = [HeadRef(*h) for h in self.head_profile]


# head -> [n_q, t] attention rows
SelectiveAttention = dict[HeadRef, np.ndarray]


def load_qk_cache(run_id: str, hook_dir: Union[str, Path]) -> QKCapture:
    path = cache_path(hook_dir, run_id)
    if not path.exists():
        raise CacheNotFoundError(f"Q/K cache file not found: {path}.")
    return read_qkc(path)


def compute_attention_from_qk(
    capture: QKCapture, heads: Sequence[HeadRef], batch: int = 0
) -> SelectiveAttention:
    """Causal attention rows of every stored query for each requested head.

    Row ``i`` belongs to query position ``t - n_q + i`` and is exactly zero
    past that position.
    """
    out: SelectiveAttention = {}
    for ref in heads:
        ref = HeadRef(*ref)
        try:
            entry = capture.entry(ref.layer, batch)
        except KeyError:
            raise AnalysisError(
                f"layer {ref.layer} not captured (batch {batch}); captured layers: {capture.layers}"
            ) from None
        n_heads = entry.k_all.shape[1]
        if not 0 <= ref.head < n_heads:
            raise AnalysisError(f"head {ref.head} out of range; captured module has {n_heads} heads")
        q = entry.q[:, ref.head, :]
        k = entry.k_all[:, ref.head, :]
        rows = np.zeros((q.shape[0], k.shape[0]), dtype=np.float64)
        for i, pos in enumerate(entry.query_positions):
            rows[i, : pos + 1] = attention_reference(q[i], k[: pos + 1])
        out[ref] = rows
    return out


def head_focus_scores(
    attn: SelectiveAttention, spans: SpanPair, attn_func: str = "sum_normalize"
) -> dict[HeadRef, float]:
    if attn_func not in ATTN_FUNCS:
        raise AnalysisError(f"unknown attn_func {attn_func!r}; expected one of {ATTN_FUNCS}")
    per_head = {}
    for ref, rows in attn.items():
        row = rows[-1]
        spans.check(row.shape[0])
        inst = float(row[spans.instruction.start : spans.instruction.end].sum())
        query = float(row[spans.query.start : spans.query.end].sum())
        total = inst + query
        if total == 0.0:
            log.warning("head %s puts no attention on either span; scoring 0", ref)
            per_head[ref] = 0.0
        else:
            per_head[ref] = inst / total
    return per_head


def attn2score(
    attn: SelectiveAttention, spans: SpanPair, attn_func: str = "sum_normalize"
) -> float:
    """Mean over heads of ``s_inst / (s_inst + s_query)`` for the last query row."""
    per_head = head_focus_scores(attn, spans, attn_func)
    if not per_head:
        raise AnalysisError("no heads to score")
    return float(np.mean(list(per_head.values())))


@dataclass
class FocusResult:
    score: float
    per_head_scores: dict[HeadRef, float]
    verdict: str

    def to_json(self) -> dict:
        return {
            "score": self.score,
            "verdict": self.verdict,
            "per_head_scores": {str(h): s for h, s in self.per_head_scores.items()},
        }


def verdict_for(score: float, threshold: float) -> str:
    return "suspicious" if score < threshold else "benign"


def focus_result(
    capture: QKCapture, spec: AnalyzerSpec, threshold: float, batch: int = 0
) -> FocusResult:
    if not spec.head_profile:
        raise AnalysisError("analyzer spec has an empty head profile")
    if len(spec.input_range) <= batch:
        raise AnalysisError(f"no input_range given for batch item {batch}")
    attn = compute_attention_from_qk(capture, spec.head_profile, batch)
    per_head = head_focus_scores(attn, spec.input_range[batch], spec.attn_func)
    score = float(np.mean(list(per_head.values())))
    return FocusResult(score, per_head, verdict_for(score, threshold))


def analyze_injection(
    run_id: str, hook_dir: Union[str, Path], spec: AnalyzerSpec, threshold: float
) -> FocusResult:
    return focus_result(load_qk_cache(run_id, hook_dir), spec, threshold)


@dataclass
class RelevanceResult:
    scores: list[float]
    ranking: list[int]
    per_head_scores: list[dict[HeadRef, float]] = field(default_factory=list, repr=False)

    def to_json(self) -> dict:
        return {"scores": self.scores, "ranking": self.ranking}


def rank_scores(scores: Sequence[float]) -> list[int]:
    return sorted(range(len(scores)), key=lambda i: (-scores[i], i))


def rerank(
    captures: Sequence[QKCapture], doc_spans: Sequence[Sequence[int]], heads: Sequence[HeadRef]
) -> RelevanceResult:
    """Score each document by the last prompt token's attention mass on it."""
    if len(captures) != len(doc_spans):
        raise AnalysisError(f"{len(captures)} captures but {len(doc_spans)} document spans")
    if not captures:
        raise AnalysisError("no documents to rank")
    if not heads:
        raise AnalysisError("no heads given for reranking")
    scores, per_doc = [], []
    for capture, span in zip(captures, doc_spans):
        start, end = span
        attn = compute_attention_from_qk(capture, heads)
        contrib = {}
        for ref, rows in attn.items():
            row = rows[-1]
            if not 0 <= start < end <= row.shape[0]:
                raise AnalysisError(f"document span {tuple(span)} invalid for context of length {row.shape[0]}")
            contrib[ref] = float(row[start:end].sum())
        per_doc.append(contrib)
        scores.append(float(np.mean(list(contrib.values()))))
    return RelevanceResult(scores, rank_scores(scores), per_doc)


@dataclass
class SteeringVector:
    layer: int
    vector: np.ndarray
    n_positive: int
    n_negative: int

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector.astype(np.float64)))


def residual_at(
    model: Model, prompt: Union[str, Sequence[int]], layer: int, mean_positions: bool = False
) -> np.ndarray:
    """Residual stream after block ``layer`` at the last prompt position."""
    tokens = tokenize(prompt) if isinstance(prompt, (str, bytes)) else list(prompt)
    if not tokens:
        raise AnalysisError("empty prompt")
    seen: list[np.ndarray] = []

    def record(_layer: int, hidden: np.ndarray) -> np.ndarray:
        seen.append(hidden.copy())
        return hidden

    hooks = HookManager(model)
    hooks.add_residual_injector(layer, record)
    forward(model, tokens, KVCache(model.spec), hooks.tap())
    hidden = seen[0]
    return hidden.mean(axis=0, dtype=np.float64) if mean_positions else hidden[-1]


def build_steering_vector(
    model: Model,
    positive_prompts: Sequence[Union[str, Sequence[int]]],
    negative_prompts: Sequence[Union[str, Sequence[int]]],
    layer: int,
    mean_positions: bool = False,
) -> SteeringVector:
    """Mean residual over positives minus mean residual over negatives."""
    if not positive_prompts or not negative_prompts:
        raise AnalysisError("both positive and negative prompt lists must be non-empty")
    if not 0 <= layer < model.spec.n_layers:
        raise AnalysisError(f"layer {layer} out of range for {model.spec.n_layers}-layer model")

    def mean_state(prompts) -> np.ndarray:
        states = [residual_at(model, p, layer, mean_positions) for p in prompts]
        return np.mean(np.stack(states).astype(np.float64), axis=0)

    v = (mean_state(positive_prompts) - mean_state(negative_prompts)).astype(np.float32)
    return SteeringVector(layer, v, len(positive_prompts), len(negative_prompts))


class AttntrackerAnalyzer:
    """Focus-score analyzer reading the cache of the current run id."""

    def __init__(self, hook_dir: Union[str, Path], layer_to_heads: Mapping[int, Sequence[int]]):
        self.hook_dir = Path(hook_dir)
        self.layer_to_heads = dict(layer_to_heads)

    def _heads(self, spec: AnalyzerSpec) -> list[HeadRef]:
        if spec.head_profile:
            return spec.head_profile
        return [HeadRef(l, h) for l in sorted(self.layer_to_heads) for h in self.layer_to_heads[l]]

    def analyze(self, spec: AnalyzerSpec, run_id: str, threshold: float = 0.5) -> dict:
        capture = load_qk_cache(run_id, self.hook_dir)
        spec = AnalyzerSpec(spec.input_range, spec.attn_func, self._heads(spec))
        results = [focus_result(capture, spec, threshold, b) for b in range(capture.batch_size)]
        if len(results) == 1:
            return results[0].to_json()
        return {
            "score": [r.score for r in results],
            "verdict": [r.verdict for r in results],
        }


class CorerAnalyzer(AttntrackerAnalyzer):
    """Relevance analyzer: one batch item of the run per document."""

    def analyze(self, spec: AnalyzerSpec, run_id: str, doc_spans: Optional[Sequence] = None) -> dict:
        if doc_spans is None:
            raise AnalysisError("corer analyzer needs doc_spans")
        capture = load_qk_cache(run_id, self.hook_dir)
        items = [capture.batch_item(b) for b in range(capture.batch_size)]
        return rerank(items, doc_spans, self._heads(spec)).to_json()


__all__ = [
    "AnalysisError",
    "AnalyzerSpec",
    "AttntrackerAnalyzer",
    "CacheNotFoundError",
    "CorerAnalyzer",
    "FocusResult",
    "FormatError",
    "RelevanceResult",
    "SelectiveAttention",
    "Span",
    "SpanPair",
    "SteeringVector",
    "analyze_injection",
    "attn2score",
    "build_steering_vector",
    "compute_attention_from_qk",
    "head_focus_scores",
    "load_qk_cache",
    "parse_input_range",
    "rerank",
]
