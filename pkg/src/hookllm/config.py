"""Hook config file and ``VLLM_HOOK_*`` environment protocol."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Optional, Sequence

from .runtime import ModelSpec

log = logging.getLogger(__name__)

LAST_TOKEN = "last_token"
ALL_TOKENS = "all_tokens"
HOOKQ_MODES = (LAST_TOKEN, ALL_TOKENS)

ENV_FLAG = "VLLM_HOOK_FLAG"
ENV_DIR = "VLLM_HOOK_DIR"
ENV_RUN_ID = "VLLM_RUN_ID"
ENV_HOOKQ_MODE = "VLLM_HOOKQ_MODE"
ENV_LAYER_HEADS = "VLLM_HOOK_LAYER_HEADS"

DEFAULT_RUN_ID_FILENAME = "run_id"


class ConfigError(ValueError):
    pass


class HeadRef(NamedTuple):
    layer: int
    head: int

    def __str__(self) -> str:
        return f"{self.layer}:{self.head}"


@dataclass(frozen=True)
class HookConfig:
    model_name: str
    model_id: str
    important_heads: tuple[HeadRef, ...] = ()
    hookq_mode: str = ALL_TOKENS
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def layer_heads(self) -> dict[int, list[int]]:
        return heads_to_layer_map(self.important_heads)


def _check_mode(mode: Any) -> str:
    if mode not in HOOKQ_MODES:
        raise ConfigError(f"unknown hookq_mode {mode!r}; expected one of {HOOKQ_MODES}")
    return mode


def _dedupe_heads(heads: Sequence[HeadRef]) -> tuple[HeadRef, ...]:
    seen: dict[HeadRef, None] = {}
    for h in heads:
        if h in seen:
            log.warning("duplicate important head %s dropped", h)
        seen.setdefault(h, None)
    return tuple(seen)


def parse_config(text: str) -> HookConfig:
    """Parse a hook config JSON document.

    Reads ``model_info.{name,model_id}``, ``params.important_heads`` and
    ``hookq.hookq_mode``; other keys are kept in ``extra`` and otherwise
    ignored.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")

    info = doc.get("model_info", {})
    params = doc.get("params", {})
    hookq = doc.get("hookq", {})
    for key, block in (("model_info", info), ("params", params), ("hookq", hookq)):
        if not isinstance(block, dict):
            raise ConfigError(f"{key!r} must be an object")

    heads = []
    for entry in params.get("important_heads", []):
        if (
            not isinstance(entry, list)
            or len(entry) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in entry)
        ):
            raise ConfigError(f"important_heads entry must be [layer, head] integers, got {entry!r}")
        if entry[0] < 0 or entry[1] < 0:
            raise ConfigError(f"negative index in important_heads entry {entry!r}")
        heads.append(HeadRef(*entry))

    extra = {k: v for k, v in doc.items() if k not in ("model_info", "params", "hookq")}
    return HookConfig(
        model_name=str(info.get("name", "")),
        model_id=str(info.get("model_id", "")),
        important_heads=_dedupe_heads(heads),
        hookq_mode=_check_mode(hookq.get("hookq_mode", ALL_TOKENS)),
        extra=extra,
    )


def load_config(path: str | os.PathLike) -> HookConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _parse_index(token: str, what: str, source: str) -> int:
    token = token.strip()
    try:
        value = int(token)
    except ValueError:
        raise ConfigError(f"non-integer {what} {token!r} in layer-heads string {source!r}") from None
    if value < 0:
        raise ConfigError(f"negative {what} {value} in layer-heads string {source!r}")
    return value


def parse_layer_heads(s: str) -> dict[int, list[int]]:
    """Parse ``'0:0,3,6;15:2'`` into ``{0: [0, 3, 6], 15: [2]}``."""
    out: dict[int, list[int]] = {}
    if not s.strip():
        return out
    for group in s.split(";"):
        if not group.strip():
            continue
        if ":" not in group:
            raise ConfigError(f"missing ':' in layer-heads group {group!r}")
        layer_s, heads_s = group.split(":", 1)
        layer = _parse_index(layer_s, "layer", s)
        heads = out.setdefault(layer, [])
        for h in heads_s.split(","):
            head = _parse_index(h, "head", s)
            if head not in heads:
                heads.append(head)
    return out


def heads_to_layer_map(heads: Sequence[HeadRef]) -> dict[int, list[int]]:
    out: dict[int, list[int]] = {}
    for layer, head in sorted(set(HeadRef(*h) for h in heads)):
        out.setdefault(layer, []).append(head)
    return out


def layer_map_to_heads(layer_heads: Mapping[int, Sequence[int]]) -> list[HeadRef]:
    return [HeadRef(l, h) for l in sorted(layer_heads) for h in sorted(set(layer_heads[l]))]


def serialize_layer_heads(layer_heads: Mapping[int, Sequence[int]]) -> str:
    """Canonical string form: layers ascending, heads ascending."""
    return ";".join(
        f"{layer}:{','.join(str(h) for h in sorted(set(layer_heads[layer])))}"
        for layer in sorted(layer_heads)
        if layer_heads[layer]
    )


def validate(config: HookConfig, spec: ModelSpec) -> list[str]:
    """All bound violations of ``config`` against ``spec``; empty means ok."""
    problems = []
    for ref in config.important_heads:
        if not 0 <= ref.layer < spec.n_layers:
            problems.append(
                f"layer {ref.layer} out of range for head {ref} (model has {spec.n_layers} layers)"
            )
        if not 0 <= ref.head < spec.n_heads:
            problems.append(
                f"head {ref.head} out of range for head {ref} (model has {spec.n_heads} heads)"
            )
    return problems


@dataclass
class EnvSettings:
    """Runtime hook settings, normally read from ``VLLM_HOOK_*`` variables.

    ``hook_flag_path`` of ``None`` means capture is not gated.
    """

    hook_dir: Optional[Path]
    run_id_file: Optional[Path] = None
    hook_flag_path: Optional[Path] = None
    hookq_mode: str = ALL_TOKENS
    layer_heads: dict[int, list[int]] = field(default_factory=dict)
    capture_decode_steps: bool = False

    def __post_init__(self) -> None:
        _check_mode(self.hookq_mode)
        if self.hook_dir is not None:
            self.hook_dir = Path(self.hook_dir)
        if self.hook_flag_path is not None:
            self.hook_flag_path = Path(self.hook_flag_path)
        if self.run_id_file is not None:
            self.run_id_file = Path(self.run_id_file)
        elif self.hook_dir is not None:
            self.run_id_file = self.hook_dir / DEFAULT_RUN_ID_FILENAME

    @classmethod
    def from_env(
        cls,
        environ: Optional[Mapping[str, str]] = None,
        config: Optional[HookConfig] = None,
        **overrides: Any,
    ) -> "EnvSettings":
        """Precedence: environment, then ``overrides`` (``None`` skipped), then ``config``."""
        env = os.environ if environ is None else environ
        settings: dict[str, Any] = {}
        if config is not None:
            if config.important_heads:
                settings["layer_heads"] = config.layer_heads
            settings["hookq_mode"] = config.hookq_mode
        settings.update({k: v for k, v in overrides.items() if v is not None})
        if env.get(ENV_DIR):
            settings["hook_dir"] = Path(env[ENV_DIR])
        if env.get(ENV_RUN_ID):
            settings["run_id_file"] = Path(env[ENV_RUN_ID])
        if env.get(ENV_FLAG):
            settings["hook_flag_path"] = Path(env[ENV_FLAG])
        if env.get(ENV_HOOKQ_MODE):
            settings["hookq_mode"] = env[ENV_HOOKQ_MODE]
        if env.get(ENV_LAYER_HEADS):
            settings["layer_heads"] = parse_layer_heads(env[ENV_LAYER_HEADS])
        settings.setdefault("hook_dir", None)
        return cls(**settings)

    def flag_active(self) -> bool:
        return self.hook_flag_path is None or self.hook_flag_path.exists()

    def require_hook_dir(self) -> Path:
        if self.hook_dir is None:
            raise ConfigError(f"no hook directory configured (set {ENV_DIR})")
        if not self.hook_dir.is_dir():
            raise FileNotFoundError(f"hook directory does not exist: {self.hook_dir}")
        if not os.access(self.hook_dir, os.W_OK):
            raise PermissionError(f"hook directory is not writable: {self.hook_dir}")
        return self.hook_dir
