"""Acceptance criteria, one marked group per criterion.

The conftest summary hook prints a ``[PASS]``/``[FAIL]`` line per group.
Run only these with ``pytest -m acceptance``.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hookllm.analyzers import (
    AnalyzerSpec,
    SpanPair,
    attn2score,
    build_steering_vector,
    compute_attention_from_qk,
    focus_result,
    rerank,
)
from hookllm.cli import rerank_prompt
from hookllm.config import ALL_TOKENS, LAST_TOKEN, HeadRef, parse_config, parse_layer_heads
from hookllm.formats import QKCapture, QKEntry, dumps_qkc, loads_qkc, read_qkc
from hookllm.runtime import KVCache, HookTap, forward, generate_greedy, tokenize
from hookllm.worker import (
    HookManager,
    SteeringPlan,
    begin_run,
    cache_path,
    flush_capture,
    install_probes,
    install_steering,
    read_run_id,
)

from conftest import random_prompt
from oracle import reference_forward

ALL_HEADS = [HeadRef(l, h) for l in range(2) for h in range(4)]
EVERY_HEAD = {0: [0, 1, 2, 3], 1: [0, 1, 2, 3]}


def crit(number: int, title: str):
    return pytest.mark.acceptance(number, title)


def probed_run(model, env, prompts, max_new):
    """Generate every prompt under one run with probes installed; flush and read back."""
    hooks = HookManager(model)
    probe = install_probes(hooks, env)
    run_id = begin_run(env)
    probe.begin()
    results = []
    for i, p in enumerate(prompts):
        probe.start_item(i)
        results.append(generate_greedy(model, p, max_new, hooks.tap()))
    cap = probe.finish(run_id)
    path = flush_capture(cap, run_id, env) if cap else None
    probe.detach()
    return results, run_id, path


# -- 1. non-interference ----------------------------------------------------

C1 = crit(1, "non-interference: probed generation is bit-identical to unprobed")


@C1
@pytest.mark.parametrize("mode", [LAST_TOKEN, ALL_TOKENS])
def test_probing_does_not_change_tokens(toy_model, hook_env, tmp_path, mode):
    rng = np.random.default_rng(1001)
    prompts = [random_prompt(rng, 4, 64) for _ in range(50)]
    (tmp_path / "flag").touch()
    env = hook_env(hookq_mode=mode, layer_heads=EVERY_HEAD, hook_flag_path=tmp_path / "flag")
    probed, _, path = probed_run(toy_model, env, prompts, 16)
    assert path is not None and path.exists()  # probes really were active
    for p, got in zip(prompts, probed):
        want = generate_greedy(toy_model, p, 16)
        assert got.generated_tokens == want.generated_tokens
        assert got.logits_digests == want.logits_digests


# -- 2. Q/K reconstruction --------------------------------------------------

C2 = crit(2, "Q/K reconstruction: cached rows match in-pass attention within 1e-5")


def _in_pass_prefill_attention(model, prompt):
    probs = {}
    forward(model, prompt, KVCache(model.spec), HookTap(attn_observer=lambda l, pos, p: probs.__setitem__(l, p)))
    return probs


@C2
@pytest.mark.parametrize("mode", [LAST_TOKEN, ALL_TOKENS])
def test_reconstruction_matches_in_pass(toy_model, hook_env, mode):
    rng = np.random.default_rng(2002)
    prompts = [random_prompt(rng, 4, 64) for _ in range(10)]
    env = hook_env(hookq_mode=mode, layer_heads=EVERY_HEAD)
    _, run_id, path = probed_run(toy_model, env, prompts, 3)
    cap = read_qkc(path)
    worst = 0.0
    for b, prompt in enumerate(prompts):
        in_pass = _in_pass_prefill_attention(toy_model, prompt)
        rebuilt = compute_attention_from_qk(cap, ALL_HEADS, batch=b)
        for ref in ALL_HEADS:
            expected = in_pass[ref.layer][ref.head].astype(np.float64)
            if mode == LAST_TOKEN:
                expected = expected[-1:]
            got = rebuilt[ref]
            assert got.shape == expected.shape
            worst = max(worst, float(np.abs(got - expected).max()))
            if mode == ALL_TOKENS:
                assert np.all(got[np.triu_indices(len(prompt), k=1)] == 0.0)
    assert worst <= 1e-5, worst


# -- 3. protocol conformance ------------------------------------------------

C3 = crit(3, "protocol conformance: config, layer-head env syntax, run ids, .qkc round trip")


@C3
def test_granite_config(granite_text):
    cfg = parse_config(granite_text)
    assert len(cfg.important_heads) == 41
    assert len(cfg.layer_heads) == 13
    assert cfg.hookq_mode == LAST_TOKEN


@C3
def test_layer_heads_env_syntax():
    assert parse_layer_heads("0:0,3,6;15:2") == {0: [0, 3, 6], 15: [2]}


@C3
def test_run_id_file_and_cache_naming(toy_model, hook_env, tmp_path):
    env = hook_env(hookq_mode=LAST_TOKEN)
    _, run_id, path = probed_run(toy_model, env, [tokenize("protocol")], 2)
    assert read_run_id(env) == run_id
    assert (tmp_path / "run_id").read_text().strip() == run_id
    assert path == cache_path(tmp_path, run_id) == tmp_path / f"qk_{run_id}.qkc"


@C3
@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 3), st.text(max_size=20))
def test_qkc_round_trip_bit_exact(seed, t, n_entries, run_id):
    rng = np.random.default_rng(seed)
    entries = []
    for i in range(n_entries):
        k = rng.standard_normal((t, 4, 8)).astype(np.float32) * np.float32(10.0 ** rng.integers(-30, 30))
        n_q = int(rng.integers(1, t + 1))
        entries.append(QKEntry(f"model.layers.{i}.self_attn.attn", i, k[t - n_q :].copy(), k, batch=i))
    cap = QKCapture(run_id, entries)
    data = dumps_qkc(cap)
    back = loads_qkc(data)
    assert dumps_qkc(back) == data
    assert back.run_id == run_id
    for a, b in zip(cap.entries, back.entries):
        assert (a.name, a.layer_num, a.batch) == (b.name, b.layer_num, b.batch)
        assert a.q.tobytes() == b.q.tobytes() and a.k_all.tobytes() == b.k_all.tobytes()


# -- 4. focus score ---------------------------------------------------------

C4 = crit(4, "focus score: analytic cases, unit interval, monotonicity")
SPANS = SpanPair.of((0, 4), (4, 8))


def _rows(*rows):
    return {HeadRef(0, i): np.asarray([r], dtype=np.float64) for i, r in enumerate(rows)}


@C4
def test_focus_analytic_rows():
    assert attn2score(_rows([0.25] * 4 + [0] * 4), SPANS) == 1.0
    assert attn2score(_rows([0] * 4 + [0.25] * 4), SPANS) == 0.0
    assert attn2score(_rows([0.125] * 8), SPANS) == 0.5


def _saturated_capture(target: slice, t=8):
    # logit gap of ~5.6e4 underflows exp() to exactly zero off the target span
    k = np.full((t, 4, 8), -100.0, dtype=np.float32)
    k[target] = 100.0
    q = np.full((1, 4, 8), 100.0, dtype=np.float32)
    return QKCapture("sat", [QKEntry("model.layers.0.self_attn.attn", 0, q, k)])


@C4
@pytest.mark.parametrize(
    "capture, expected",
    [
        (_saturated_capture(slice(0, 4)), 1.0),
        (_saturated_capture(slice(4, 8)), 0.0),
        (QKCapture("u", [QKEntry("model.layers.0.self_attn.attn", 0,
                                 np.zeros((1, 4, 8), np.float32), np.ones((8, 4, 8), np.float32))]), 0.5),
    ],
)
def test_focus_analytic_captures(capture, expected):
    heads = [HeadRef(0, h) for h in range(4)]
    result = focus_result(capture, AnalyzerSpec([SPANS], head_profile=heads), threshold=0.5)
    assert result.score == expected


@C4
@settings(max_examples=1000, deadline=None)
@given(
    st.integers(0, 2**32 - 1),
    st.integers(2, 24),
    st.integers(1, 3),
    st.floats(0.01, 50.0),
)
def test_focus_in_unit_interval(seed, t, n_heads, scale):
    rng = np.random.default_rng(seed)
    k = (rng.standard_normal((t, n_heads, 8)) * scale).astype(np.float32)
    q = (rng.standard_normal((1, n_heads, 8)) * scale).astype(np.float32)
    cap = QKCapture("p", [QKEntry("model.layers.0.self_attn.attn", 0, q, k)])
    cut = int(rng.integers(1, t))
    spans = SpanPair.of((0, cut), (cut, t))
    score = focus_result(cap, AnalyzerSpec([spans], head_profile=[HeadRef(0, h) for h in range(n_heads)]), 0.5).score
    assert 0.0 <= score <= 1.0


@C4
@settings(max_examples=500, deadline=None)
@given(st.floats(1e-6, 1.0), st.floats(1e-6, 1.0), st.floats(1e-6, 1.0))
def test_focus_monotone(inst, query, extra):
    def row(i):
        return [i / 4] * 4 + [query / 4] * 4

    assert attn2score(_rows(row(inst + extra)), SPANS) >= attn2score(_rows(row(inst)), SPANS)


@C4
def test_focus_monotone_in_logits():
    # raising every instruction key along q strictly raises the score
    rng = np.random.default_rng(4)
    q = rng.standard_normal((1, 4, 8)).astype(np.float32)
    base = rng.standard_normal((8, 4, 8)).astype(np.float32)
    heads = [HeadRef(0, h) for h in range(4)]
    scores = []
    for bump in np.linspace(0, 2, 9):
        k = base.copy()
        k[:4] += np.float32(bump) * q[0]
        cap = QKCapture("m", [QKEntry("model.layers.0.self_attn.attn", 0, q, k)])
        scores.append(focus_result(cap, AnalyzerSpec([SPANS], head_profile=heads), 0.5).score)
    assert all(b > a for a, b in zip(scores, scores[1:]))


# -- 5. steering ------------------------------------------------------------

C5 = crit(5, "steering: identity cases, exact injection, lower layers untouched, pos=neg gives zero")


def _steered(model, plan, prompt, max_new=12):
    hooks = HookManager(model)
    if plan is not None:
        install_steering(hooks, plan)
    return generate_greedy(model, prompt, max_new, hooks.tap())


@C5
@pytest.mark.parametrize("alpha, zero", [(0.0, False), (5.0, True)])
def test_identity_steering(toy_model, alpha, zero):
    rng = np.random.default_rng(5005)
    v = np.zeros(32, np.float32) if zero else rng.standard_normal(32).astype(np.float32)
    for _ in range(10):
        prompt = random_prompt(rng, 4, 32)
        for layer in (0, 1):
            got = _steered(toy_model, SteeringPlan(layer, v, alpha), prompt)
            want = _steered(toy_model, None, prompt)
            assert got.generated_tokens == want.generated_tokens
            assert got.logits_digests == want.logits_digests


def _residuals(model, prompt, plan):
    """Residual stream after every block, recorded downstream of any injection."""
    hooks = HookManager(model)
    if plan is not None:
        install_steering(hooks, plan)
    log = {}
    for layer in range(model.spec.n_layers):
        hooks.add_residual_injector(layer, lambda l, h: log.__setitem__(l, h.copy()) or h)
    forward(model, prompt, KVCache(model.spec), hooks.tap())
    return log


@C5
@pytest.mark.parametrize("layer", [0, 1])
@pytest.mark.parametrize("positions", ["all", "last"])
def test_injection_exact_and_local(toy_model, layer, positions):
    rng = np.random.default_rng(55)
    v = rng.standard_normal(32).astype(np.float32)
    alpha = 2.5
    prompt = random_prompt(rng, 8, 40)
    base = _residuals(toy_model, prompt, None)
    steered = _residuals(toy_model, prompt, SteeringPlan(layer, v, alpha, positions))
    for below in range(layer):
        assert np.array_equal(steered[below], base[below])
    expected = base[layer].copy()
    if positions == "all":
        expected += np.float32(alpha) * v
    else:
        expected[-1] += np.float32(alpha) * v
    assert np.array_equal(steered[layer], expected)


@C5
def test_pos_equals_neg_is_zero(toy_model):
    prompts = ["Respond politely.", "Be terse.", "x"]
    for layer in (0, 1):
        sv = build_steering_vector(toy_model, prompts, list(reversed(prompts)), layer)
        assert not sv.vector.any() and sv.norm == 0.0


# -- 6. reranker ------------------------------------------------------------

C6 = crit(6, "reranker: matches brute-force recomputation, permutation equivariant")
QUERY = "where is it?"


def _docs():
    rng = np.random.default_rng(6006)
    return ["".join(chr(c) for c in rng.integers(97, 123, size=int(rng.integers(6, 20)))) for _ in range(3)]


def _rerank(model, env, query, docs):
    prompts, spans = zip(*(rerank_prompt(query, d) for d in docs))
    _, _, path = probed_run(model, env, [tokenize(p) for p in prompts], 0)
    cap = read_qkc(path)
    return rerank([cap.batch_item(i) for i in range(len(docs))], spans, ALL_HEADS)


@C6
def test_rerank_matches_brute_force(toy_model, hook_env):
    docs = _docs()
    got = _rerank(toy_model, hook_env(hookq_mode=LAST_TOKEN, layer_heads=EVERY_HEAD), QUERY, docs)
    expected = []
    for d in docs:
        prompt, (s, e) = rerank_prompt(QUERY, d)
        ref = reference_forward(toy_model, tokenize(prompt))
        expected.append(np.mean([ref["attn"][h.layer][h.head, -1, s:e].sum() for h in ALL_HEADS]))
    np.testing.assert_allclose(got.scores, expected, atol=1e-5, rtol=0)
    assert got.ranking == sorted(range(3), key=lambda i: (-expected[i], i))
    assert len(set(np.round(expected, 4))) == 3  # no near-ties that would make the ranking check vacuous


@C6
def test_rerank_permutation_equivariance(toy_model, hook_env):
    docs = _docs()
    env = hook_env(hookq_mode=LAST_TOKEN, layer_heads=EVERY_HEAD)
    base = _rerank(toy_model, env, QUERY, docs)
    ranked_docs = [docs[i] for i in base.ranking]
    for perm in itertools.permutations(range(3)):
        res = _rerank(toy_model, env, QUERY, [docs[i] for i in perm])
        assert res.scores == [base.scores[i] for i in perm]
        assert [docs[perm[i]] for i in res.ranking] == ranked_docs


# -- 7. KV cache ------------------------------------------------------------

C7 = crit(7, "KV cache: incremental decode equals full-prefix recompute")


@C7
def test_incremental_equals_recompute(toy_model):
    rng = np.random.default_rng(7007)
    max_new = 16
    for _ in range(20):
        prompt = random_prompt(rng, 4, 64)
        fast = generate_greedy(toy_model, prompt, max_new).generated_tokens
        seq = list(prompt)
        slow = []
        for _ in range(len(fast)):
            logits = forward(toy_model, seq, KVCache(toy_model.spec))
            nxt = int(np.argmax(logits[-1]))
            slow.append(nxt)
            seq.append(nxt)
        assert fast == slow
