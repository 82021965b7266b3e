"""Install probes and interventions on a model and persist what they capture.

Capture files follow the ``<hook_dir>/qk_<run_id>.qkc`` naming protocol and
the run id of the latest generate call lives in the run-id file.
"""

from __future__ import annotations

import itertools
import logging
import secrets
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .config import LAST_TOKEN, EnvSettings
from .formats import QKCapture, QKEntry, write_qkc
from .runtime import HookTap, Model, ResidualInjector

log = logging.getLogger(__name__)

CACHE_SUFFIX = ".qkc"
ATTN_SUFFIX = ".self_attn.attn"


class HookError(RuntimeError):
    pass


def cache_path(hook_dir: Path | str, run_id: str) -> Path:
    return Path(hook_dir) / f"qk_{run_id}{CACHE_SUFFIX}"


class ProbeHandle:
    """Detachable registration of one or more hook callbacks."""

    def __init__(self, detach_fn: Callable[[], None]):
        self._detach_fn = detach_fn
        self.attached = True

    def detach(self) -> None:
        if not self.attached:
            log.warning("hook handle already detached; ignoring")
            return
        self._detach_fn()
        self.attached = False


def detach(handle: ProbeHandle) -> None:
    handle.detach()


class HookManager:
    """Mutable hook table over an immutable :class:`Model`.

    :meth:`tap` folds the registered callbacks into a single
    :class:`HookTap`, or ``None`` when nothing is installed so that forward
    passes take the untapped path.
    """

    def __init__(self, model: Model):
        self.model = model
        self._ids = itertools.count()
        self._qk: dict[int, Callable] = {}
        self._resid: dict[int, tuple[int, ResidualInjector]] = {}
        self.probe: Optional["QKProbe"] = None

    def add_qk_observer(self, fn: Callable) -> ProbeHandle:
        key = next(self._ids)
        self._qk[key] = fn
        return ProbeHandle(lambda: self._qk.pop(key, None))

    def add_residual_injector(self, layer: int, fn: ResidualInjector) -> ProbeHandle:
        if not 0 <= layer < self.model.spec.n_layers:
            raise HookError(f"layer {layer} out of range for {self.model.spec.n_layers}-layer model")
        key = next(self._ids)
        self._resid[key] = (layer, fn)
        return ProbeHandle(lambda: self._resid.pop(key, None))

    @property
    def empty(self) -> bool:
        return not self._qk and not self._resid

    def tap(self) -> Optional[HookTap]:
        if self.empty:
            return None
        observers = list(self._qk.values())
        injectors = list(self._resid.values())

        def qk_observer(name, layer, q, k_all):
            for fn in observers:
                fn(name, layer, q, k_all)

        def residual_injector(layer, hidden):
            for at, fn in injectors:
                if at == layer:
                    hidden = fn(layer, hidden)
            return hidden

        return HookTap(
            qk_observer=qk_observer if observers else None,
            residual_injector=residual_injector if injectors else None,
        )


def hooked_module_names(model: Model, layers) -> list[str]:
    wanted = set(layers)
    names = []
    for name in model.module_names:
        if name.endswith(ATTN_SUFFIX):
            layer_num = int(name.split("model.layers.")[1].split(".")[0])
            if layer_num in wanted:
                names.append(name)
    return names


class QKProbe(ProbeHandle):
    """Records post-RoPE q and all keys of the selected layers.

    Full per-layer tensors are kept; head selection happens in the analyzers.
    Lifecycle per generate call: :meth:`begin` (polls the flag file once),
    :meth:`start_item` before each prompt, :meth:`finish` to collect.
    """

    def __init__(self, manager: HookManager, env: EnvSettings):
        self.manager = manager
        self.env = env
        self.layers = sorted(env.layer_heads)
        self.modules = hooked_module_names(manager.model, self.layers)
        self.active = False
        self._item = 0
        self._records: dict[tuple[int, int], QKEntry] = {}
        self._handle = manager.add_qk_observer(self._observe)
        super().__init__(self._remove)

    def _remove(self) -> None:
        self._handle.detach()
        if self.manager.probe is self:
            self.manager.probe = None

    def begin(self) -> bool:
        self.active = self.env.flag_active()
        self._records = {}
        self._item = 0
        return self.active

    def start_item(self, index: int) -> None:
        self._item = index

    def _observe(self, name: str, layer: int, q: np.ndarray, k_all: np.ndarray) -> None:
        if not self.active or name not in self.modules:
            return
        key = (self._item, layer)
        rec = self._records.get(key)
        if rec is None:
            rows = q[-1:] if self.env.hookq_mode == LAST_TOKEN else q
            self._records[key] = QKEntry(name, layer, rows, k_all, self._item)
        elif self.env.capture_decode_steps:
            rec.q = np.concatenate([rec.q, q], axis=0)
            rec.k_all = k_all

    def finish(self, run_id: str) -> QKCapture:
        entries = [self._records[k] for k in sorted(self._records)]
        self._records = {}
        self.active = False
        return QKCapture(run_id, entries)


def install_probes(manager: HookManager, env: EnvSettings) -> QKProbe:
    if not env.layer_heads:
        raise HookError("no layers to probe: layer_heads is empty")
    if manager.probe is not None and manager.probe.attached:
        raise HookError("Q/K probes are already installed on this model")
    n_layers = manager.model.spec.n_layers
    unknown = sorted(l for l in env.layer_heads if not 0 <= l < n_layers)
    if unknown:
        raise HookError(f"unknown layers {unknown} for {n_layers}-layer model")
    probe = QKProbe(manager, env)
    manager.probe = probe
    log.debug("hooked %d modules: %s", len(probe.modules), probe.modules)
    return probe


def new_run_id() -> str:
    return f"{time.strftime('%Y%m%dT%H%M%S')}-{time.time_ns() % 1_000_000_000:09d}-{secrets.token_hex(4)}"


def begin_run(env: EnvSettings) -> str:
    """Create a fresh run id and write it (with a newline) to the run-id file."""
    env.require_hook_dir()
    run_id = new_run_id()
    while cache_path(env.hook_dir, run_id).exists():
        run_id = new_run_id()
    try:
        env.run_id_file.write_text(run_id + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write run-id file {env.run_id_file}: {exc}") from exc
    return run_id


def read_run_id(env: EnvSettings) -> str:
    return Path(env.run_id_file).read_text(encoding="utf-8").strip()


def flush_capture(capture: QKCapture, run_id: str, env: EnvSettings) -> Path:
    if not capture:
        raise HookError("nothing captured")
    if capture.run_id != run_id:
        capture = QKCapture(run_id, capture.entries)
    return write_qkc(cache_path(env.require_hook_dir(), run_id), capture)


POSITIONS = ("all", "last")


@dataclass
class SteeringPlan:
    layer: int
    vector: np.ndarray
    alpha: float = 1.0
    positions: str = "all"

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float32).reshape(-1)
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("steering vector has non-finite entries")
        if not np.isfinite(self.alpha):
            raise ValueError(f"alpha must be finite, got {self.alpha}")
        if self.positions not in POSITIONS:
            raise ValueError(f"positions must be one of {POSITIONS}, got {self.positions!r}")


def steering_injector(plan: SteeringPlan) -> ResidualInjector:
    delta = np.float32(plan.alpha) * plan.vector

    def inject(layer: int, hidden: np.ndarray) -> np.ndarray:
        if plan.positions == "all":
            return hidden + delta
        out = hidden.copy()
        out[-1] = hidden[-1] + delta
        return out

    return inject


def install_steering(manager: HookManager, plan: SteeringPlan) -> ProbeHandle:
    spec = manager.model.spec
    if plan.vector.shape != (spec.d_model,):
        raise ValueError(f"steering vector has dimension {plan.vector.size}, model d_model is {spec.d_model}")
    if not 0 <= plan.layer < spec.n_layers:
        raise HookError(f"steering layer {plan.layer} out of range for {spec.n_layers}-layer model")
    return manager.add_residual_injector(plan.layer, steering_injector(plan))
