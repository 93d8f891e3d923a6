"""Single-binary CLI around the whole stack.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every failure path
prints one line starting with ``error:`` to stderr; stdout carries payload
only, so pipelines stay clean. Commands that use randomness without an
explicit --seed pick one and print it to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys

import numpy as np

from . import curate as cur
from . import evalharness as ev
from . import tensor
from . import tokenizer as tok
from .container import (
    load_adapter,
    load_container,
    save_adapter,
    save_container,
)
from .generate import SamplerParams, generate, render_transcript
from .lora import default_targets, init_adapter, lora_finetune_fd, lora_merge
from .model import ModelConfig, Transformer, dequantize_weights, new_random, quantize_weights
from .server import DeskServer, configure_logging, load_server_config
from .tokenizer import MergeTable


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(f"error: {message}", file=sys.stderr)
        self.print_usage(sys.stderr)
        raise SystemExit(2)


def _seed_or_pick(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = secrets.randbelow(2**32)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--max-tokens", type=int, default=128)
    p.add_argument("--temperature", type=float, default=0.8)
    p.add_argument("--top-k", type=int, default=0)
    p.add_argument("--top-p", type=float, default=1.0)
    p.add_argument("--rep-penalty", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=None)


def _params_from(args, seed: int) -> SamplerParams:
    return SamplerParams(
        temperature=args.temperature,
        top_k=args.top_k,
        top_p=args.top_p,
        repetition_penalty=args.rep_penalty,
        seed=seed,
        max_tokens=args.max_tokens,
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="deskllm", description="desk-scale local LLM toolkit")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="cap worker parallelism (outputs are identical for any value)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("new", help="create a random micro model container")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=384)
    p.add_argument("--max-seq", type=int, default=512)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--merges", default=None, help="optional merges.txt to embed")

    p = sub.add_parser("quantize", help="quantize projections to 4-bit blocks")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="complete a prompt")
    p.add_argument("--model", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--stream", action="store_true")
    _sampling_flags(p)

    p = sub.add_parser("chat", help="interactive REPL using the chat template")
    p.add_argument("--model", required=True)
    _sampling_flags(p)

    p = sub.add_parser("curate", help="run the curation pipeline")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--min-chars", type=int, default=16)
    p.add_argument("--min-words", type=int, default=3)
    p.add_argument("--jaccard", type=float, default=0.9)
    p.add_argument("--drop-source", action="append", default=[])

    p = sub.add_parser("expand", help="expand a creative prompt schema")
    p.add_argument("--template", required=True)
    p.add_argument("--slots", required=True, help="JSON file: slot name -> value list")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("project", help="export a 2-D map of a pair corpus")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluation harness")
    esub = p.add_subparsers(dest="eval_command", required=True)
    pe = esub.add_parser("ppl", help="clipped perplexity over a pair corpus")
    pe.add_argument("--model", required=True)
    pe.add_argument("--data", required=True)
    pe.add_argument("--clip", type=float, default=100.0)
    pm = esub.add_parser("mc", help="multiple-choice accuracy on a task file")
    pm.add_argument("--model", required=True)
    pm.add_argument("--task", required=True)
    pm.add_argument("--name", default=None, help="model name for the result record")
    pr = esub.add_parser("report", help="cross-model benchmark table")
    pr.add_argument("--in", dest="inputs", nargs="+", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--csv", default=None)
    pr.add_argument("--reference", default=None)

    p = sub.add_parser("tune-lora", help="finite-difference LoRA tuning")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=8.0)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--fd-eps", type=float, default=1e-3)
    p.add_argument("--targets", nargs="*", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("merge-lora", help="merge an adapter into base weights")
    p.add_argument("--model", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("serve", help="run the local completion server")
    p.add_argument("--config", required=True)

    return parser


def cmd_new(args) -> int:
    seed = _seed_or_pick(args)
    merges = tok.load_merges_txt(args.merges) if args.merges else MergeTable()
    config = ModelConfig(
        vocab_size=args.vocab, d_model=args.d_model, n_layers=args.layers,
        n_heads=args.heads, d_ff=args.d_ff, max_seq=args.max_seq,
    )
    save_container(config, new_random(config, seed), merges, args.out)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_quantize(args) -> int:
    config, weights, merges = load_container(args.input)
    save_container(config, quantize_weights(weights), merges, args.out)
    before = os.path.getsize(args.input)
    after = os.path.getsize(args.out)
    print(f"{before} -> {after} bytes ({before / after:.2f}x smaller)", file=sys.stderr)
    return 0


def cmd_generate(args) -> int:
    config, weights, merges = load_container(args.model)
    seed = _seed_or_pick(args) if args.temperature > 0 else (args.seed or 0)
    model = Transformer(weights, config)
    params = _params_from(args, seed)
    if args.stream:
        def emit(token_id, fragment):
            sys.stdout.write(fragment)
            sys.stdout.flush()
            return True

        result = generate(model, merges, args.prompt, params, on_token=emit)
        sys.stdout.write("\n")
    else:
        result = generate(model, merges, args.prompt, params)
        print(result.text)
    print(f"finish_reason: {result.finish_reason}", file=sys.stderr)
    return 0


def cmd_chat(args) -> int:
    config, weights, merges = load_container(args.model)
    seed = _seed_or_pick(args) if args.temperature > 0 else (args.seed or 0)
    model = Transformer(weights, config)
    turns: list[tuple[str, str]] = []
    print("deskllm chat — /quit to exit", file=sys.stderr)
    while True:
        try:
            line = input("> ")
        except EOFError:
            break
        if line.strip() == "/quit":
            break
        if not line.strip():
            continue
        prompt = render_transcript(turns, line)
        params = _params_from(args, seed)

        def emit(token_id, fragment):
            sys.stdout.write(fragment)
            sys.stdout.flush()
            return True

        result = generate(model, merges, prompt, params, on_token=emit)
        sys.stdout.write("\n")
        turns.append((line, result.text))
        seed += 1  # vary sampled turns while staying reproducible
    return 0


def cmd_curate(args) -> int:
    pairs = cur.ingest(args.input)
    if args.drop_source:
        dropped = [p for p in pairs if p.source in set(args.drop_source)]
        pairs = [p for p in pairs if p.source not in set(args.drop_source)]
        print(f"dropped {len(dropped)} pairs by source tag", file=sys.stderr)
    config = cur.CurationConfig(
        min_chars=args.min_chars, min_words=args.min_words, near_dup_jaccard=args.jaccard
    )
    kept, report = cur.curate_pipeline(pairs, config)
    cur.write_pairs(kept, args.out)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    print(
        f"kept {report.counts['kept']} of {report.counts['input']}", file=sys.stderr
    )
    return 0


def cmd_expand(args) -> int:
    with open(args.slots, "r", encoding="utf-8") as fh:
        slots = json.load(fh)
    if not isinstance(slots, dict) or not all(isinstance(v, list) for v in slots.values()):
        raise ValueError("slots file must map slot names to value lists")
    seed = _seed_or_pick(args) if args.limit is not None else (args.seed or 0)
    template = cur.SchemaTemplate(args.template, slots)
    prompts = cur.schema_expand(template, limit=args.limit, seed=seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(p + "\n")
    print(f"wrote {len(prompts)} prompts", file=sys.stderr)
    return 0


def cmd_project(args) -> int:
    pairs = cur.ingest(args.input)
    coords = cur.project_2d(pairs)
    cur.write_projection_csv(pairs, coords, args.out)
    print(f"wrote {len(pairs)} coordinates", file=sys.stderr)
    return 0


def cmd_eval(args) -> int:
    if args.eval_command == "ppl":
        config, weights, merges = load_container(args.model)
        model = Transformer(weights, config)
        pairs = cur.ingest(args.data)
        records, summary = ev.clipped_perplexity(model, merges, pairs, clip=args.clip)
        for r in records:
            print(json.dumps({
                "id": r.pair_id, "tokens": r.token_count,
                "nll": r.nll, "perplexity": r.perplexity,
            }))
        print(summary.to_json())
        return 0
    if args.eval_command == "mc":
        config, weights, merges = load_container(args.model)
        model = Transformer(weights, config)
        task = ev.load_task(args.task)
        name = args.name or os.path.basename(args.model)
        result = ev.mc_accuracy(model, merges, task, model_name=name)
        print(json.dumps({"model": result.model, "task": result.task, "accuracy": result.accuracy}))
        return 0
    results = []
    for path in args.inputs:
        results.extend(ev.read_results(path))
    table, text, csv_text = ev.report_table(results, reference_model=args.reference)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
    print(text, end="")
    return 0


def cmd_tune_lora(args) -> int:
    seed = _seed_or_pick(args)
    config, weights, merges = load_container(args.model)
    if weights.is_quantized:
        weights = dequantize_weights(weights)
    pairs = cur.ingest(args.data)
    adapter = init_adapter(
        config, rank=args.rank, alpha=args.alpha,
        targets=args.targets or default_targets(config), seed=seed,
    )
    tuned, trace = lora_finetune_fd(
        weights, config, adapter, pairs, merges,
        steps=args.steps, lr=args.lr, fd_eps=args.fd_eps,
    )
    save_adapter(tuned, args.out)
    print(f"loss: {trace[0]:.4f} -> {trace[-1]:.4f} over {len(trace) - 1} steps", file=sys.stderr)
    return 0


def cmd_merge_lora(args) -> int:
    config, weights, merges = load_container(args.model)
    if weights.is_quantized:
        weights = dequantize_weights(weights)
    adapter = load_adapter(args.adapter)
    merged = lora_merge(weights, adapter)
    save_container(config, merged, merges, args.out)
    print(f"wrote {args.out}", file=sys.stderr)
    return 0


def cmd_serve(args) -> int:
    config = load_server_config(args.config)
    server = DeskServer(config)
    print(f"listening on {config.host}:{server.port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        print("shutting down", file=sys.stderr)
        server.stop()
    return 0


_COMMANDS = {
    "new": cmd_new,
    "quantize": cmd_quantize,
    "generate": cmd_generate,
    "chat": cmd_chat,
    "curate": cmd_curate,
    "expand": cmd_expand,
    "project": cmd_project,
    "eval": cmd_eval,
    "tune-lora": cmd_tune_lora,
    "merge-lora": cmd_merge_lora,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    tensor.set_num_threads(max(1, args.threads))
    try:
        return _COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
