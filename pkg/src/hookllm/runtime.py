"""Deterministic decoder-only transformer with named hook points.

Pre-norm blocks (RMSNorm, RoPE attention, SwiGLU MLP), float32 throughout.
Every layer exposes two hook points:

* ``model.layers.<i>.self_attn.attn`` - observes post-RoPE q and the full k
* ``model.layers.<i>`` - the residual stream after block ``i``
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .formats import atomic_write

BOS = 256
EOS = 257

WEIGHT_MAGIC = b"HKRT"
WEIGHT_VERSION = 1
_HEADER = struct.Struct("<4sI6IdI")

_RMS_EPS = np.float32(1e-5)


class WeightFileError(ValueError):
    """Weight file is malformed or does not match the requested spec."""


class SequenceOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int = 260
    max_seq_len: int = 128
    rope_theta: float = 10000.0

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.max_seq_len < 2:
            raise ValueError(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}"
            )
        if self.d_head % 2:
            raise ValueError(f"d_head must be even for rotary embeddings, got {self.d_head}")
        if self.vocab_size <= EOS:
            raise ValueError(f"vocab_size must exceed {EOS} to hold BOS/EOS")
        if not (self.rope_theta > 0 and math.isfinite(self.rope_theta)):
            raise ValueError(f"rope_theta must be positive, got {self.rope_theta}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return 4 * self.d_model

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        known = {"n_layers", "n_heads", "d_model", "vocab_size", "max_seq_len", "rope_theta"}
        spec = cls(**{k: v for k, v in data.items() if k in known})
        if "d_head" in data and int(data["d_head"]) != spec.d_head:
            raise ValueError(
                f"d_head {data['d_head']} inconsistent with d_model/n_heads = {spec.d_head}"
            )
        return spec

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_head": self.d_head,
            "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len,
            "rope_theta": self.rope_theta,
        }


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in their serialization order."""
    d, ff = spec.d_model, spec.d_ff
    shapes: dict[str, tuple[int, ...]] = {"embed": (spec.vocab_size, d)}
    for i in range(spec.n_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        shapes[p + "wq"] = (d, d)
        shapes[p + "wk"] = (d, d)
        shapes[p + "wv"] = (d, d)
        shapes[p + "wo"] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_gate"] = (d, ff)
        shapes[p + "w_up"] = (d, ff)
        shapes[p + "w_down"] = (ff, d)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, spec.vocab_size)
    return shapes


def attn_module_name(layer: int) -> str:
    return f"model.layers.{layer}.self_attn.attn"


def residual_point_name(layer: int) -> str:
    return f"model.layers.{layer}"


@dataclass(frozen=True, eq=False)
class Model:
    """Immutable parameter set plus hook-point names; safe to share across threads."""

    spec: ModelSpec
    weights: dict[str, np.ndarray]
    module_names: tuple[str, ...] = field(init=False)

    def __post_init__(self) -> None:
        shapes = param_shapes(self.spec)
        missing = sorted(set(shapes) - set(self.weights))
        if missing:
            raise WeightFileError(f"missing parameters: {missing[:5]}")
        frozen = {}
        for name, shape in shapes.items():
            w = np.asarray(self.weights[name])
            if w.shape != shape:
                raise WeightFileError(
                    f"shape mismatch for {name}: expected {shape}, got {w.shape}"
                )
            w = np.array(w, dtype=np.float32, copy=True)
            w.flags.writeable = False
            frozen[name] = w
        object.__setattr__(self, "weights", frozen)
        names = []
        for i in range(self.spec.n_layers):
            names.append(residual_point_name(i))
            names.append(attn_module_name(i))
        object.__setattr__(self, "module_names", tuple(names))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in param_shapes(self.spec):
            h.update(self.weights[name].astype("<f4").tobytes())
        return h.hexdigest()

    def save(self, path: Union[str, Path]) -> None:
        save_weights(self, path)


def _seeded_weights(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(spec).items():
        if len(shape) == 1:
            weights[name] = np.ones(shape, dtype=np.float32)
        elif name == "embed":
            weights[name] = rng.standard_normal(shape).astype(np.float32)
        else:
            scale = 1.0 / math.sqrt(shape[0])
            weights[name] = (rng.standard_normal(shape) * scale).astype(np.float32)
    return weights


def init_model(spec: ModelSpec, source: Union[int, str, Path]) -> Model:
    """Build a model from an integer seed or from an ``HKRT`` weight file.

    A weight file must carry a header identical to ``spec``.
    """
    if isinstance(source, (int, np.integer)) and not isinstance(source, bool):
        return Model(spec, _seeded_weights(spec, int(source)))
    file_spec, weights = _read_weight_file(Path(source))
    if file_spec != spec:
        diffs = [
            f"{k}: file {v} != spec {spec.to_dict()[k]}"
            for k, v in file_spec.to_dict().items()
            if spec.to_dict()[k] != v
        ]
        raise WeightFileError("shape mismatch between weight file and spec: " + "; ".join(diffs))
    return Model(spec, weights)


def load_model(path: Union[str, Path]) -> Model:
    spec, weights = _read_weight_file(Path(path))
    return Model(spec, weights)


def save_weights(model: Model, path: Union[str, Path]) -> None:
    s = model.spec
    shapes = param_shapes(s)
    header = _HEADER.pack(
        WEIGHT_MAGIC, WEIGHT_VERSION, s.n_layers, s.n_heads, s.d_model,
        s.d_head, s.vocab_size, s.max_seq_len, float(s.rope_theta), len(shapes),
    )
    blocks = [model.weights[name].astype("<f4").tobytes() for name in shapes]
    atomic_write(path, header + b"".join(blocks))


def _read_weight_file(path: Path) -> tuple[ModelSpec, dict[str, np.ndarray]]:
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise WeightFileError(f"{path}: truncated header")
    magic, version, n_layers, n_heads, d_model, d_head, vocab, max_len, theta, count = (
        _HEADER.unpack_from(data, 0)
    )
    if magic != WEIGHT_MAGIC:
        raise WeightFileError(f"{path}: bad magic {magic!r}")
    if version != WEIGHT_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    try:
        spec = ModelSpec(n_layers, n_heads, d_model, vocab, max_len, theta)
    except ValueError as exc:
        raise WeightFileError(f"{path}: invalid header: {exc}") from exc
    if d_head != spec.d_head:
        raise WeightFileError(f"{path}: header d_head {d_head} != {spec.d_head}")
    shapes = param_shapes(spec)
    if count != len(shapes):
        raise WeightFileError(f"{path}: expected {len(shapes)} parameter blocks, header says {count}")
    expected = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values())
    if len(data) != expected:
        raise WeightFileError(f"{path}: size {len(data)} bytes, expected {expected}")
    weights = {}
    offset = _HEADER.size
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        weights[name] = np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape)
        offset += 4 * n
    return spec, weights


# -- tokenizer ---------------------------------------------------------------

def tokenize(text: Union[str, bytes]) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def detokenize(tokens: Sequence[int], vocab_size: int = 260) -> bytes:
    """Inverse of :func:`tokenize`; special ids (>= 256) are dropped."""
    out = bytearray()
    for t in tokens:
        t = int(t)
        if t < 0 or t >= vocab_size:
            raise ValueError(f"token id {t} outside vocabulary of size {vocab_size}")
        if t < 256:
            out.append(t)
    return bytes(out)


# -- forward pass ------------------------------------------------------------

QKObserver = Callable[[str, int, np.ndarray, np.ndarray], None]
ResidualInjector = Callable[[int, np.ndarray], np.ndarray]
AttnObserver = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass
class HookTap:
    """Callbacks invoked synchronously during :func:`forward`.

    ``qk_observer(module_name, layer, q, k_all)`` gets copies of the post-RoPE
    queries for the new positions ``[n_new, n_heads, d_head]`` and keys for
    every position so far ``[t, n_heads, d_head]``.
    ``residual_injector(layer, hidden)`` returns the replacement residual
    stream ``[n_new, d_model]`` after block ``layer``.
    ``attn_observer(layer, positions, probs)`` sees the in-pass attention
    probabilities ``[n_heads, n_new, t]``.
    """

    qk_observer: Optional[QKObserver] = None
    residual_injector: Optional[ResidualInjector] = None
    attn_observer: Optional[AttnObserver] = None


class KVCache:
    """Per-layer key/value storage, ``[n_heads, t, d_head]`` per layer."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        shape = (spec.n_heads, spec.max_seq_len, spec.d_head)
        self._k = [np.zeros(shape, dtype=np.float32) for _ in range(spec.n_layers)]
        self._v = [np.zeros(shape, dtype=np.float32) for _ in range(spec.n_layers)]
        self.length = 0

    def keys(self, layer: int) -> np.ndarray:
        return self._k[layer][:, : self.length]

    def values(self, layer: int) -> np.ndarray:
        return self._v[layer][:, : self.length]

    def _write(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        end = self.length + k.shape[1]
        self._k[layer][:, self.length : end] = k
        self._v[layer][:, self.length : end] = v
        return self._k[layer][:, :end], self._v[layer][:, :end]


def _rms_norm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + _RMS_EPS)) * w


def _rope_tables(spec: ModelSpec, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inv_freq = spec.rope_theta ** (-np.arange(0, spec.d_head, 2, dtype=np.float64) / spec.d_head)
    angles = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(np.float32), np.sin(angles).astype(np.float32)


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: [n, heads, d_head]; rotates interleaved (even, odd) pairs
    even, odd = x[..., 0::2], x[..., 1::2]
    c, s = cos[:, None, :], sin[:, None, :]
    out = np.empty_like(x)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c
    return out


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (np.float32(1.0) + np.exp(-x))


def forward(
    model: Model,
    new_tokens: Sequence[int],
    cache: KVCache,
    tap: Optional[HookTap] = None,
) -> np.ndarray:
    """Run ``new_tokens`` through the model, extending ``cache``.

    Returns logits ``[len(new_tokens), vocab_size]``.
    """
    spec, w = model.spec, model.weights
    n = len(new_tokens)
    if n == 0:
        raise ValueError("forward needs at least one token")
    if cache.length + n > spec.max_seq_len:
        raise SequenceOverflowError(
            f"sequence of {cache.length + n} tokens exceeds max_seq_len {spec.max_seq_len}"
        )
    ids = np.asarray(new_tokens, dtype=np.int64)
    if ids.min() < 0 or ids.max() >= spec.vocab_size:
        raise ValueError(f"token ids must lie in [0, {spec.vocab_size})")

    H, dh = spec.n_heads, spec.d_head
    positions = np.arange(cache.length, cache.length + n)
    cos, sin = _rope_tables(spec, positions)
    scale = np.float32(1.0 / math.sqrt(dh))
    x = w["embed"][ids]
    for i in range(spec.n_layers):
        p = f"layers.{i}."
        h = _rms_norm(x, w[p + "attn_norm"])
        q = _apply_rope((h @ w[p + "wq"]).reshape(n, H, dh), cos, sin)
        k = _apply_rope((h @ w[p + "wk"]).reshape(n, H, dh), cos, sin)
        v = (h @ w[p + "wv"]).reshape(n, H, dh)
        k_all, v_all = cache._write(i, k.transpose(1, 0, 2), v.transpose(1, 0, 2))
        if tap is not None and tap.qk_observer is not None:
            tap.qk_observer(attn_module_name(i), i, q.copy(), k_all.transpose(1, 0, 2).copy())

        scores = np.matmul(q.transpose(1, 0, 2), k_all.transpose(0, 2, 1)) * scale
        t = k_all.shape[1]
        future = np.arange(t)[None, :] > positions[:, None]
        scores = np.where(future[None], np.float32(-np.inf), scores)
        scores = scores - scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores)
        probs = probs / probs.sum(axis=-1, keepdims=True)
        if tap is not None and tap.attn_observer is not None:
            tap.attn_observer(i, positions.copy(), probs.copy())

        attn = np.matmul(probs, v_all).transpose(1, 0, 2).reshape(n, spec.d_model)
        x = x + attn @ w[p + "wo"]
        h = _rms_norm(x, w[p + "mlp_norm"])
        x = x + (_silu(h @ w[p + "w_gate"]) * (h @ w[p + "w_up"])) @ w[p + "w_down"]
        if tap is not None and tap.residual_injector is not None:
            x = np.asarray(tap.residual_injector(i, x), dtype=np.float32)
            if x.shape != (n, spec.d_model):
                raise ValueError(f"residual injector at layer {i} returned shape {x.shape}")
    cache.length += n
    return _rms_norm(x, w["final_norm"]) @ w["lm_head"]


@dataclass
class GenerationResult:
    prompt_tokens: list[int]
    generated_tokens: list[int]
    logits_digests: list[str] = field(default_factory=list)

    @property
    def text(self) -> str:
        return bytes(t for t in self.generated_tokens if t < 256).decode("utf-8", "replace")


def logits_digest(logits: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(logits, dtype="<f4").tobytes()).hexdigest()[:16]


def generate_greedy(
    model: Model,
    prompt: Sequence[int],
    max_new_tokens: int,
    tap: Optional[HookTap] = None,
) -> GenerationResult:
    """Argmax decoding with a KV cache; ties go to the lowest token id.

    The prompt is always prefilled, even for ``max_new_tokens == 0``, so
    probes see it.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if max_new_tokens < 0:
        raise ValueError("max_new_tokens must be >= 0")
    if len(prompt) + max_new_tokens > model.spec.max_seq_len:
        raise SequenceOverflowError(
            f"prompt ({len(prompt)}) + max_new_tokens ({max_new_tokens}) exceeds "
            f"max_seq_len {model.spec.max_seq_len}"
        )
    cache = KVCache(model.spec)
    last = forward(model, prompt, cache, tap)[-1]
    generated: list[int] = []
    digests: list[str] = []
    for step in range(max_new_tokens):
        digests.append(logits_digest(last))
        nxt = int(np.argmax(last))
        generated.append(nxt)
        if nxt == EOS or step == max_new_tokens - 1:
            break
        last = forward(model, [nxt], cache, tap)[-1]
    return GenerationResult(prompt, generated, digests)


def attention_reference(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """softmax(q . k^T / sqrt(d_head)) for one query row, in float64.

    ``k`` must only hold the positions the query may attend to.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 2 or q.ndim != 1 or k.shape[1] != q.shape[0]:
        raise ValueError(f"shape mismatch: q {q.shape}, k {k.shape}")
    if k.shape[0] == 0:
        raise ValueError("attention over an empty key set")
    logits = (k @ q) / math.sqrt(q.shape[0])
    e = np.exp(logits - logits.max())
    return e / e.sum()
