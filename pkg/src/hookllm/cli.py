"""``hookllm`` command line.

Every subcommand prints one JSON line on stdout; diagnostics go to stderr.
Exit codes: 0 ok/benign, 1 operational error, 2 usage error, 3 suspicious.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import report
from .analyzers import (
    ATTN_FUNCS,
    AnalysisError,
    AnalyzerSpec,
    CacheNotFoundError,
    build_steering_vector,
    compute_attention_from_qk,
    focus_result,
    load_qk_cache,
    parse_input_range,
    rerank,
)
from .config import (
    ConfigError,
    EnvSettings,
    HookConfig,
    layer_map_to_heads,
    load_config,
    parse_layer_heads,
)
from .formats import FormatError, read_steering_vector, write_steering_vector
from .orchestrator import ACTIVE, PASSIVE, HookLLM
from .runtime import ModelSpec, WeightFileError, generate_greedy, init_model, load_model, tokenize
from .worker import HookError, SteeringPlan, read_run_id

log = logging.getLogger("hookllm")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_SUSPICIOUS = 0, 1, 2, 3

DOC_PREFIX = "Document: "
QUERY_PREFIX = "\nQuery: "


class UsageError(Exception):
    pass


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, sort_keys=False) + "\n")


def _read_lines(path: str) -> list[str]:
    lines = [l.rstrip("\r\n") for l in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [l for l in lines if l.strip()]
    if not lines:
        raise UsageError(f"{path} contains no non-empty lines")
    return lines


def _settings(args, config: Optional[HookConfig] = None) -> EnvSettings:
    heads = getattr(args, "heads", None)
    return EnvSettings.from_env(
        config=config,
        hook_dir=getattr(args, "hook_dir", None),
        layer_heads=parse_layer_heads(heads) if heads else None,
        capture_decode_steps=getattr(args, "capture_decode_steps", None) or None,
    )


def _load_config(args) -> HookConfig:
    if getattr(args, "config", None):
        return load_config(args.config)
    return HookConfig(model_name="", model_id="")


def cmd_init_model(args) -> int:
    try:
        text = args.spec
        if not text.lstrip().startswith("{"):
            text = Path(text).read_text(encoding="utf-8")
        spec = ModelSpec.from_dict(json.loads(text))
    except (OSError, ValueError, TypeError) as exc:
        raise UsageError(f"invalid model spec: {exc}") from exc
    model = init_model(spec, args.seed)
    model.save(args.out)
    _emit({"path": str(args.out), "checksum": model.checksum(), "spec": spec.to_dict()})
    return EXIT_OK


def _run_generate(args, model, mode: str, steer_vector: Optional[str]):
    config = _load_config(args)
    env = _settings(args, config)
    plan = None
    if mode == ACTIVE:
        file_layer, vector = read_steering_vector(steer_vector)
        layer = file_layer if args.layer is None else args.layer
        plan = SteeringPlan(layer, vector, args.alpha, args.positions)
    llm = HookLLM(model, config, env, mode, plan, model_name=config.model_name or None)
    try:
        return llm.generate(args.prompt, args.max_new)
    finally:
        llm.close()


def _unwrap(values: list):
    return values[0] if len(values) == 1 else values


def cmd_generate(args) -> int:
    if args.mode == ACTIVE and not args.steer_vector:
        raise UsageError("--mode active requires --steer-vector")
    if args.mode == PASSIVE and args.steer_vector:
        raise UsageError("--steer-vector is only valid with --mode active")
    results, run_id = _run_generate(args, load_model(args.model), args.mode, args.steer_vector)
    _emit(
        {
            "text": _unwrap([r.text for r in results]),
            "run_id": run_id,
            "tokens": _unwrap([r.generated_tokens for r in results]),
        }
    )
    return EXIT_OK


def cmd_steer(args) -> int:
    model = load_model(args.model)
    steered, run_id = _run_generate(args, model, ACTIVE, args.steer_vector)
    baseline = [generate_greedy(model, tokenize(p), args.max_new) for p in args.prompt]
    _emit(
        {
            "text": _unwrap([r.text for r in steered]),
            "baseline_text": _unwrap([r.text for r in baseline]),
            "changed": _unwrap([s.generated_tokens != b.generated_tokens for s, b in zip(steered, baseline)]),
            "run_id": run_id,
        }
    )
    return EXIT_OK


def cmd_analyze(args) -> int:
    config = _load_config(args)
    env = _settings(args, config)
    hook_dir = env.require_hook_dir()
    run_id = args.run_id or read_run_id(env)
    spans = parse_input_range(args.input_range)
    spec = AnalyzerSpec([spans], args.attn_func, layer_map_to_heads(env.layer_heads))
    capture = load_qk_cache(run_id, hook_dir)
    result = focus_result(capture, spec, args.threshold)
    doc = {"run_id": run_id, **result.to_json()}
    if args.figure:
        attn = compute_attention_from_qk(capture, spec.head_profile)
        doc["figure"] = str(report.plot_focus(result, attn, spans, args.figure, args.threshold))
    _emit(doc)
    return EXIT_SUSPICIOUS if result.verdict == "suspicious" else EXIT_OK


def rerank_prompt(query: str, doc: str) -> tuple[str, tuple[int, int]]:
    """Prompt text for one (query, document) pair and the document's token span."""
    start = len(tokenize(DOC_PREFIX))
    end = start + len(tokenize(doc))
    return f"{DOC_PREFIX}{doc}{QUERY_PREFIX}{query}", (start, end)


def cmd_rerank(args) -> int:
    docs = _read_lines(args.docs)
    config = _load_config(args)
    model = load_model(args.model)
    with tempfile.TemporaryDirectory(prefix="hookllm-rerank-") as scratch:
        env = _settings(args, config)
        if env.hook_dir is None:
            env = EnvSettings(
                Path(scratch), None, env.hook_flag_path, env.hookq_mode, env.layer_heads
            )
        if not env.layer_heads:
            raise UsageError("no heads to score: pass --heads or a config with important_heads")
        prompts, spans = zip(*(rerank_prompt(args.query, d) for d in docs))
        llm = HookLLM(model, config, env, PASSIVE)
        try:
            _, run_id = llm.generate(list(prompts), 0)
        finally:
            llm.close()
        capture = load_qk_cache(run_id, env.hook_dir)
        items = [capture.batch_item(b) for b in range(capture.batch_size)]
        result = rerank(items, spans, layer_map_to_heads(env.layer_heads))
    doc = {"run_id": run_id, **result.to_json()}
    if args.figure:
        labels = [d if len(d) <= 40 else d[:37] + "..." for d in docs]
        doc["figure"] = str(report.plot_relevance(result, args.figure, labels))
    _emit(doc)
    return EXIT_OK


def cmd_build_steer_vector(args) -> int:
    positives, negatives = _read_lines(args.pos), _read_lines(args.neg)
    model = load_model(args.model)
    sv = build_steering_vector(model, positives, negatives, args.layer, args.mean_positions)
    write_steering_vector(args.out, sv.layer, sv.vector)
    _emit(
        {
            "path": str(args.out),
            "layer": sv.layer,
            "d_model": int(sv.vector.size),
            "norm": sv.norm,
            "n_positive": sv.n_positive,
            "n_negative": sv.n_negative,
        }
    )
    return EXIT_OK


def infer_hookq_mode(q_rows: int, k_rows: int) -> str:
    if q_rows == 1 and k_rows > 1:
        return "last_token"
    if q_rows == k_rows and k_rows > 1:
        return "all_tokens"
    if q_rows == k_rows == 1:
        return "indeterminate"
    return "decode_steps"


def cmd_inspect_cache(args) -> int:
    env = _settings(args)
    hook_dir = env.require_hook_dir()
    run_id = args.run_id or read_run_id(env)
    capture = load_qk_cache(run_id, hook_dir)
    modules = [
        {
            "name": e.name,
            "layer_num": e.layer_num,
            "batch": e.batch,
            "q_shape": list(e.q.shape),
            "k_all_shape": list(e.k_all.shape),
            "q_rows": int(e.q.shape[0]),
        }
        for e in capture.entries
    ]
    modes = sorted({infer_hookq_mode(e.q.shape[0], e.k_all.shape[0]) for e in capture.entries})
    doc = {
        "run_id": capture.run_id,
        "batch_size": capture.batch_size,
        "layers": capture.layers,
        "hookq_mode": modes[0] if len(modes) == 1 else modes,
        "modules": modules,
    }
    if args.figure:
        doc["figure"] = str(report.plot_capture(capture, args.figure))
    _emit(doc)
    return EXIT_OK


def _generation_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True, action="append")
    p.add_argument("--max-new", type=int, default=16)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--layer", type=int, help="override the steering vector's layer")
    p.add_argument("--positions", choices=("all", "last"), default="all")
    p.add_argument("--heads", help="layer-heads string, e.g. '0:0,3;1:2'")
    p.add_argument("--hook-dir")
    p.add_argument("--capture-decode-steps", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hookllm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="write a seeded weight file")
    p.add_argument("--spec", required=True, help="model spec JSON file or inline JSON")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init_model)

    p = sub.add_parser("generate", help="greedy generation with probes or steering")
    _generation_args(p)
    p.add_argument("--mode", choices=(PASSIVE, ACTIVE), default=PASSIVE)
    p.add_argument("--steer-vector")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("steer", help="active generation next to its unsteered baseline")
    _generation_args(p)
    p.add_argument("--steer-vector", required=True)
    p.set_defaults(func=cmd_steer, mode=ACTIVE)

    p = sub.add_parser("analyze", help="focus score of a captured run")
    p.add_argument("--config")
    p.add_argument("--run-id")
    p.add_argument("--analyzer", choices=("attntracker",), default="attntracker")
    p.add_argument("--input-range", required=True, help="'is,ie:qs,qe' half-open token ranges")
    p.add_argument("--attn-func", choices=ATTN_FUNCS, default="sum_normalize")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--heads")
    p.add_argument("--hook-dir")
    p.add_argument("--figure", help="write a focus-score figure to this path")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("rerank", help="rank documents by attention relevance")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--docs", required=True, help="file with one document per line")
    p.add_argument("--heads")
    p.add_argument("--hook-dir")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("build-steer-vector", help="mean residual difference of two prompt sets")
    p.add_argument("--model", required=True)
    p.add_argument("--pos", required=True)
    p.add_argument("--neg", required=True)
    p.add_argument("--layer", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mean-positions", action="store_true")
    p.set_defaults(func=cmd_build_steer_vector)

    p = sub.add_parser("inspect-cache", help="summarize a .qkc capture")
    p.add_argument("--run-id")
    p.add_argument("--hook-dir")
    p.add_argument("--figure")
    p.set_defaults(func=cmd_inspect_cache)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hookllm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        AnalysisError,
        CacheNotFoundError,
        ConfigError,
        FormatError,
        HookError,
        WeightFileError,
        OSError,
        ValueError,
        KeyError,
    ) as exc:
        print(f"hookllm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
