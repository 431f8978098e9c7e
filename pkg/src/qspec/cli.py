"""Command-line surface: quantize | generate | bench | probe | cost-sim | sweep.

Machine-readable output goes to stdout (or ``--out``); human summaries go to
stderr.  Exit code 0 on success; failures exit nonzero with a category-prefixed
message on stderr.
"""

from __future__ import annotations

import argparse
import sys
import time

from .costmodel import (
    LatencyProfile,
    analytic_speedup,
    AcceptanceModel,
    format_sweep_table,
    gamma_sweep,
    illustrative_profile,
    parse_profile,
    replay_trace,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ProfileError,
    QSpecError,
    SequenceOverflowError,
    ShapeError,
    TokenIdError,
    TraceError,
    WorkloadError,
)
from .quant import ExecutionMode
from .serving import format_stats, parse_workload, per_valid_token_latency, run_fcfs
from .specdec import (
    GenerationConfig,
    format_cycle_record,
    generate_greedy,
    generate_qspec,
    parse_trace,
    similarity_probe,
)
from .storage import (
    config_from_text,
    load_checkpoint,
    quantize_checkpoint,
    random_float_tensors,
    random_init,
    save_checkpoint,
    save_float_checkpoint,
)

_ERROR_CATEGORIES: list[tuple[type[Exception], str, int]] = [
    (ConfigError, "config error", 2),
    (CheckpointError, "checkpoint error", 4),
    (WorkloadError, "workload error", 5),
    (ProfileError, "profile error", 6),
    (TraceError, "trace error", 7),
    (SequenceOverflowError, "overflow error", 8),
    (TokenIdError, "token error", 9),
    (ShapeError, "shape error", 10),
    (QSpecError, "error", 11),
    (OSError, "io error", 3),
]


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8") as f:
            f.write(text + ("\n" if text and not text.endswith("\n") else ""))
    else:
        print(text)


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _parse_token_ids(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split()]
    except ValueError as exc:
        raise WorkloadError(f"prompt must be whitespace-separated token ids: {exc}") from exc


def _read_prompt(args: argparse.Namespace) -> list[int]:
    if args.prompt is not None:
        return _parse_token_ids(args.prompt)
    if args.prompt_file is not None:
        with open(args.prompt_file, "r", encoding="utf-8") as f:
            return _parse_token_ids(f.read())
    raise ConfigError("one of --prompt or --prompt-file is required")


def _generation_config(args: argparse.Namespace, mode: str) -> GenerationConfig:
    gamma = args.gamma
    if mode != "qspec" and gamma is not None:
        _info(f"warning: --gamma is ignored for mode {mode!r}")
    return GenerationConfig(
        gamma=gamma if (mode == "qspec" and gamma is not None) else 3,
        max_new_tokens=args.max_new_tokens,
        eos_token=args.eos_token,
    )


def _load_profile(path: str | None) -> LatencyProfile:
    if path is None:
        return illustrative_profile()
    with open(path, "r", encoding="utf-8") as f:
        return parse_profile(f.read())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_quantize(args: argparse.Namespace) -> int:
    if args.random:
        if args.config is None or args.seed is None:
            raise ConfigError("--random requires --config and --seed")
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = config_from_text(f.read())
        tensors = random_float_tensors(cfg, args.seed)
        if args.save_float:
            save_float_checkpoint(cfg, tensors, args.save_float)
            _info(f"float checkpoint written to {args.save_float}")
        model = random_init(cfg, args.seed)
        save_checkpoint(model, args.out)
    elif args.input is not None:
        model = quantize_checkpoint(args.input, args.out, group_size=args.group_size)
    else:
        raise ConfigError("quantize needs --input or --random")
    packed = sum(q.packed_bytes for _, q in model.quantized_tensors())
    summary = "\n".join([
        f"checkpoint: {args.out}",
        f"n_layers: {model.config.n_layers}",
        f"group_size: {model.config.group_size}",
        f"packed_code_bytes: {packed}",
    ])
    _emit(summary, None)
    _info(f"quantized checkpoint written to {args.out}")
    return 0


def _cmd_generate(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    prompt = _read_prompt(args)
    cfg = _generation_config(args, args.mode)
    t0 = time.perf_counter()
    if args.mode == "qspec":
        result = generate_qspec(model, prompt, cfg)
    else:
        mode = (
            ExecutionMode.HIGH_PRECISION if args.mode == "w4a16"
            else ExecutionMode.LOW_PRECISION
        )
        result = generate_greedy(model, prompt, mode, cfg)
    elapsed = time.perf_counter() - t0
    _emit(" ".join(str(t) for t in result.tokens), args.out)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            for i, rec in enumerate(result.cycles):
                f.write(format_cycle_record(i, rec) + "\n")
    _info(
        f"mode={args.mode} new_tokens={len(result.new_tokens)} cycles={len(result.cycles)} "
        f"acceptance={result.acceptance_rate:.4f} tokens_per_cycle={result.tokens_per_cycle:.3f} "
        f"finish={result.finish_reason} wall={elapsed:.3f}s"
    )
    return 0


def _cmd_bench(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    with open(args.workload, "r", encoding="utf-8") as f:
        requests = parse_workload(f.read())
    cfg = _generation_config(args, args.mode)
    serving_mode = {
        "qspec": "qspec", "w4a16": "greedy-high", "w4a4": "greedy-low",
    }[args.mode]
    outputs, stats = run_fcfs(requests, args.batch, model, cfg, serving_mode)
    if args.out:
        lines = [
            f"{req.id} " + " ".join(str(t) for t in outputs[req.id].tokens)
            for req in requests if req.id in outputs
        ]
        _emit("\n".join(lines), args.out)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            for req in requests:
                if req.id not in outputs:
                    continue
                for i, rec in enumerate(outputs[req.id].cycles):
                    f.write(format_cycle_record(i, rec, request_id=req.id) + "\n")
    print(format_stats(stats))
    if stats.total_new_tokens > 0 and serving_mode == "qspec":
        split = per_valid_token_latency(stats)
        print(f"per_valid_token_units: {split.total!r}")
        print(f"per_valid_token_draft_units: {split.draft_share!r}")
        print(f"per_valid_token_verify_units: {split.verify_share!r}")
    _info(
        f"served {len(outputs)}/{len(requests)} requests at batch={args.batch} "
        f"mode={args.mode}: {stats.total_new_tokens} tokens in {stats.wall_seconds:.3f}s"
    )
    return 0


def _cmd_probe(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    prompt = _read_prompt(args)
    cfg = GenerationConfig(max_new_tokens=args.max_new_tokens, eos_token=args.eos_token)
    golden = generate_greedy(model, prompt, ExecutionMode.HIGH_PRECISION, cfg).new_tokens
    records = similarity_probe(model, prompt, golden)
    lines = [
        f"{r.position}\t{r.p_high!r}\t{r.p_low!r}\t{int(r.accepted)}" for r in records
    ]
    _emit("\n".join(lines), args.out)
    n_accept = sum(r.accepted for r in records)
    _info(f"probe over {len(records)} golden positions: {n_accept} low-precision matches")
    return 0


def _cmd_cost_sim(args: argparse.Namespace) -> int:
    with open(args.trace, "r", encoding="utf-8") as f:
        cycles = parse_trace(f.read())
    profile = _load_profile(args.profile)
    report = replay_trace(cycles, profile, args.batch)
    accept_lens = [rec.accept_len for rec in cycles]
    gamma = max(len(rec.drafted) for rec in cycles)
    analytic = analytic_speedup(
        profile, AcceptanceModel.from_trace(accept_lens, gamma), gamma, args.batch
    )
    lines = [
        f"committed_tokens: {report.committed_tokens}",
        f"total_cost_units: {report.total_cost_units!r}",
        f"draft_share: {report.draft_share!r}",
        f"verify_share: {report.verify_share!r}",
        f"throughput_units: {report.throughput_units!r}",
        f"speedup_vs_base: {report.speedup_vs_base!r}",
        f"per_valid_token_latency: {report.per_valid_token_latency!r}",
        f"analytic_speedup_at_gamma_{gamma}: {analytic.speedup!r}",
    ]
    _emit("\n".join(lines), args.out)
    _info(
        f"replayed {len(cycles)} cycles at batch={args.batch}: "
        f"{report.speedup_vs_base:.3f}x vs single-token baseline"
    )
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    with open(args.workload, "r", encoding="utf-8") as f:
        requests = parse_workload(f.read())
    prompts = [r.prompt for r in requests]
    gammas = [int(g) for g in args.gammas.split(",") if g]
    if not gammas:
        raise ConfigError("--gammas must list at least one draft length")
    profile = _load_profile(args.profile)
    cfg = GenerationConfig(max_new_tokens=args.max_new_tokens, eos_token=args.eos_token)
    rows = gamma_sweep(model, prompts, gammas, profile, cfg=cfg, batch=args.batch)
    _emit(format_sweep_table(rows), args.out)
    _info(f"swept gamma over {gammas} on {len(prompts)} prompts")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qspec",
        description="Draft-verify inference engine for 4-bit weight-quantized transformers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="create or convert a quantized checkpoint")
    p.add_argument("--input", help="f32 checkpoint to quantize")
    p.add_argument("--random", action="store_true", help="generate seeded random weights")
    p.add_argument("--config", help="model config file (key=value lines) for --random")
    p.add_argument("--seed", type=int, help="seed for --random")
    p.add_argument("--save-float", help="also write the f32 checkpoint here (--random only)")
    p.add_argument("--group-size", type=int, default=None)
    p.add_argument("--out", required=True, help="output quantized checkpoint path")
    p.set_defaults(func=_cmd_quantize)

    for name, helptext in (
        ("generate", "generate tokens from a prompt"),
        ("probe", "prediction-similarity probe between the two execution modes"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--prompt", help="whitespace-separated token ids")
        p.add_argument("--prompt-file", help="file of whitespace-separated token ids")
        p.add_argument("--max-new-tokens", type=int, default=32)
        p.add_argument("--eos-token", type=int, default=None)
        p.add_argument("--out", default=None)
        if name == "generate":
            p.add_argument("--mode", choices=["qspec", "w4a16", "w4a4"], default="qspec")
            p.add_argument("--gamma", type=int, default=None)
            p.add_argument("--trace", default=None, help="write the cycle trace here")
            p.set_defaults(func=_cmd_generate)
        else:
            p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("bench", help="serve a workload with FCFS continuous batching")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--workload", required=True)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--mode", choices=["qspec", "w4a16", "w4a4"], default="qspec")
    p.add_argument("--gamma", type=int, default=None)
    p.add_argument("--max-new-tokens", type=int, default=32,
                   help="fallback cap; per-request values come from the workload")
    p.add_argument("--eos-token", type=int, default=None)
    p.add_argument("--out", default=None, help="write per-request outputs here")
    p.add_argument("--trace", default=None, help="write the cycle trace stream here")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("cost-sim", help="replay a cycle trace under a latency profile")
    p.add_argument("--trace", required=True)
    p.add_argument("--profile", default=None, help="profile file (default: built-in)")
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_cost_sim)

    p = sub.add_parser("sweep", help="acceptance-rate sweep over draft lengths")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--workload", required=True, help="prompts come from this workload file")
    p.add_argument("--gammas", default="2,3,4,5,6,7")
    p.add_argument("--profile", default=None)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--eos-token", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # map to category prefix + exit code
        for etype, prefix, code in _ERROR_CATEGORIES:
            if isinstance(exc, etype):
                print(f"{prefix}: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
