"""``HookLLM`` facade and the worker/analyzer registry."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence, Union

from .analyzers import AnalyzerSpec, AttntrackerAnalyzer, CacheNotFoundError, CorerAnalyzer
from .config import ConfigError, EnvSettings, HookConfig, validate
from .runtime import GenerationResult, Model, generate_greedy, tokenize
from .worker import (
    HookManager,
    ProbeHandle,
    QKProbe,
    SteeringPlan,
    begin_run,
    cache_path,
    flush_capture,
    install_probes,
    install_steering,
    read_run_id,
)

log = logging.getLogger(__name__)

PASSIVE = "passive"
ACTIVE = "active"
KINDS = ("worker", "analyzer")


class RegistryError(LookupError):
    pass


@dataclass
class Registry:
    entries: dict[str, dict[str, Callable[..., Any]]] = field(
        default_factory=lambda: {k: {} for k in KINDS}
    )

    def register(self, kind: str, name: str, constructor: Callable[..., Any]) -> None:
        table = self._table(kind)
        if name in table:
            raise RegistryError(f"{kind} {name!r} is already registered")
        table[name] = constructor

    def lookup(self, kind: str, name: str) -> Callable[..., Any]:
        table = self._table(kind)
        try:
            return table[name]
        except KeyError:
            raise RegistryError(
                f"unknown {kind} {name!r}; available: {sorted(table)}"
            ) from None

    def names(self, kind: str) -> list[str]:
        return sorted(self._table(kind))

    def _table(self, kind: str) -> dict[str, Callable[..., Any]]:
        if kind not in KINDS:
            raise RegistryError(f"unknown registry kind {kind!r}; expected one of {KINDS}")
        return self.entries[kind]


def register(registry: Registry, kind: str, name: str, constructor: Callable[..., Any]) -> None:
    registry.register(kind, name, constructor)


def default_registry() -> Registry:
    reg = Registry()
    reg.register("worker", "probe_qk", install_probes)
    reg.register("worker", "actsteer", install_steering)
    reg.register("analyzer", "attntracker", AttntrackerAnalyzer)
    reg.register("analyzer", "corer", CorerAnalyzer)
    return reg


REGISTRY = default_registry()


class HookLLM:
    """Model plus hooks for one session thread.

    Passive mode probes Q/K without touching generation; active mode injects
    a steering vector into the residual stream. The mode is fixed for the
    lifetime of the instance.
    """

    def __init__(
        self,
        model: Model,
        config: HookConfig,
        env: EnvSettings,
        mode: str = PASSIVE,
        plan: Optional[SteeringPlan] = None,
        registry: Optional[Registry] = None,
        model_name: Optional[str] = None,
    ):
        if mode not in (PASSIVE, ACTIVE):
            raise ValueError(f"mode must be {PASSIVE!r} or {ACTIVE!r}, got {mode!r}")
        if mode == PASSIVE and plan is not None:
            raise ValueError("passive mode does not take a steering plan")
        if mode == ACTIVE and plan is None:
            raise ValueError("active mode requires a steering plan")
        problems = validate(config, model.spec)
        if problems:
            raise ConfigError("config does not fit the model: " + "; ".join(problems))
        if model_name is not None and config.model_name and model_name != config.model_name:
            log.warning("config is for model %r but %r is loaded", config.model_name, model_name)

        self.model = model
        self.config = config
        self.env = env
        self.mode = mode
        self.plan = plan
        self.registry = registry or REGISTRY
        self.hooks = HookManager(model)
        self.probe: Optional[QKProbe] = None
        self.steering: Optional[ProbeHandle] = None
        self.last_run_id: Optional[str] = None

        if env.layer_heads:
            self.probe = self.registry.lookup("worker", "probe_qk")(self.hooks, env)
        elif mode == PASSIVE:
            log.info("no layer heads configured; passive generate will not capture")
        if mode == ACTIVE:
            self.steering = self.registry.lookup("worker", "actsteer")(self.hooks, plan)

    def close(self) -> None:
        for handle in (self.probe, self.steering):
            if handle is not None and handle.attached:
                handle.detach()

    def generate(
        self, prompts: Sequence[Union[str, Sequence[int]]], max_new_tokens: int = 16
    ) -> tuple[list[GenerationResult], str]:
        """Generate for each prompt under one run id; flush captures if any."""
        if not prompts:
            raise ValueError("prompts must be non-empty")
        token_lists = [tokenize(p) if isinstance(p, (str, bytes)) else list(p) for p in prompts]
        run_id = begin_run(self.env)
        self.last_run_id = run_id
        capturing = self.probe is not None and self.probe.attached and self.probe.begin()
        results = []
        for index, tokens in enumerate(token_lists):
            if capturing:
                self.probe.start_item(index)
            results.append(generate_greedy(self.model, tokens, max_new_tokens, self.hooks.tap()))
        if capturing:
            capture = self.probe.finish(run_id)
            if capture:
                flush_capture(capture, run_id, self.env)
        return results, run_id

    def analyze(self, analyzer_name: str, spec: AnalyzerSpec, **params: Any) -> dict:
        """Dispatch to a registered analyzer over the latest run's cache."""
        constructor = self.registry.lookup("analyzer", analyzer_name)
        if self.last_run_id is None:
            raise CacheNotFoundError(
                f"Q/K cache file not found: {cache_path(self.env.hook_dir or '.', '<run_id>')} "
                "(generate has not run yet)"
            )
        analyzer = constructor(self.env.require_hook_dir(), self.env.layer_heads)
        return analyzer.analyze(spec, read_run_id(self.env), **params)


def new_hookllm(
    model: Model,
    config: HookConfig,
    env: EnvSettings,
    mode: str = PASSIVE,
    plan: Optional[SteeringPlan] = None,
) -> HookLLM:
    return HookLLM(model, config, env, mode, plan)
