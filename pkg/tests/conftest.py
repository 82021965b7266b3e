from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from hookllm.config import EnvSettings
from hookllm.runtime import ModelSpec, init_model

DATA = Path(__file__).parent / "data"
GRANITE_CONFIG = DATA / "granite3-8b-attn.json"

TOY_SPEC = ModelSpec(n_layers=2, n_heads=4, d_model=32, vocab_size=260, max_seq_len=128)


@pytest.fixture(scope="session")
def toy_spec() -> ModelSpec:
    return TOY_SPEC


@pytest.fixture(scope="session")
def toy_model(toy_spec):
    return init_model(toy_spec, 7)


@pytest.fixture(scope="session")
def granite_text() -> str:
    return GRANITE_CONFIG.read_text()


@pytest.fixture
def hook_env(tmp_path):
    def make(**kw) -> EnvSettings:
        kw.setdefault("layer_heads", {0: [0, 1, 2, 3], 1: [0, 1, 2, 3]})
        return EnvSettings(hook_dir=tmp_path, **kw)

    return make


def random_prompt(rng: np.random.Generator, lo: int = 4, hi: int = 64) -> list[int]:
    return rng.integers(0, 256, size=int(rng.integers(lo, hi + 1))).tolist()


# -- acceptance summary: one line per criterion ------------------------------

_ACCEPTANCE: dict[int, tuple[str, list[str]]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        _ACCEPTANCE.setdefault(number, (title, []))[1].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcomes = _ACCEPTANCE[number]
        status = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"[{status}] {number}. {title} ({len(outcomes)} checks)")
