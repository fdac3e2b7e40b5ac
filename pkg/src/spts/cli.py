"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime or
numeric failure. ``SPTS_SEED`` overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .counting import count_flops
from .errors import NumericError, SptsError
from .kvcache import full_bytes, measured_bytes, predict_bytes
from .ltp import DEFAULT_RHO, calibrate, load_proxies, proxy_error, save_proxies
from .metrics import fidelity_report, flops_report
from .model import CONFIG_PRESETS, ModelConfig, gen_toy_model, load_model, save_model, synthetic_token_sequences
from .pipeline import divergence_position, generate, prefill
from .schedule import PRESETS, SkipSchedule, load_schedule

log = logging.getLogger("spts")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class ValidationError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    seed: int
    model: str | None = None
    schedule: str | None = None
    proxy: str | None = None
    prompt_ids: str | None = None
    output: str | None = None
    flags: dict = field(default_factory=dict)

    def check_inputs(self) -> None:
        for name in ("model", "schedule", "proxy", "prompt_ids"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise ValidationError(f"{name} file not found: {path}")

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def read_token_file(path: str, vocab_size: int | None = None) -> list[list[int]]:
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                seq = [int(t) for t in line.split()]
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: non-integer token") from exc
            if vocab_size is not None and any(t < 0 or t >= vocab_size for t in seq):
                raise ValidationError(f"{path}:{lineno}: token id outside [0, {vocab_size})")
            seqs.append(seq)
    if not seqs:
        raise ValidationError(f"{path}: no token sequences")
    return seqs


def _seed(args) -> int:
    env = os.environ.get("SPTS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ValidationError(f"SPTS_SEED={env!r} is not an integer") from exc
    return args.seed


def _flags(args, skip=("func", "command")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _out_dir(args) -> Path | None:
    if not args.out_dir:
        return None
    p = Path(args.out_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _schedule(args) -> SkipSchedule:
    if getattr(args, "schedule", None):
        return load_schedule(args.schedule)
    preset = getattr(args, "schedule_preset", None)
    if preset:
        return PRESETS[preset]
    raise ValidationError("a schedule is required (--schedule or --schedule-preset)")


# --- commands -----------------------------------------------------------


def cmd_gen_model(args) -> int:
    seed = _seed(args)
    if args.head_dim is None:
        if args.dim % args.heads:
            raise ValidationError(f"--dim {args.dim} is not divisible by --heads {args.heads}")
        head_dim = args.dim // args.heads
    else:
        head_dim = args.head_dim
    cfg = ModelConfig(
        num_layers=args.layers,
        hidden_dim=args.dim,
        num_heads=args.heads,
        num_kv_heads=args.kv_heads or args.heads,
        head_dim=head_dim,
        ffn_dim=args.ffn,
        vocab_size=args.vocab,
        rope_theta=args.rope_theta,
        norm_eps=args.norm_eps,
        dtype_bytes=args.dtype_bytes,
    )
    save_model(gen_toy_model(cfg, seed), args.out)
    RunManifest("gen-model", seed, output=args.out, flags=_flags(args)).write(Path(args.out + ".manifest.json"))
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_gen_tokens(args) -> int:
    seed = _seed(args)
    vocab = args.vocab
    if args.model:
        vocab = load_model(args.model).config.vocab_size
    if not vocab:
        raise ValidationError("give --vocab or --model")
    seqs = synthetic_token_sequences(vocab, args.count, args.length, seed)
    Path(args.out).write_text("".join(" ".join(map(str, s)) + "\n" for s in seqs))
    print(f"wrote {len(seqs)} sequences to {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    seed = _seed(args)
    manifest = RunManifest("calibrate", seed, model=args.model, schedule=args.schedule, output=args.out, flags=_flags(args))
    manifest.check_inputs()
    model = load_model(args.model)
    cfg = model.config
    seqs = read_token_file(args.tokens, cfg.vocab_size)
    if not 1 <= args.dlow <= cfg.ffn_dim:
        raise ValidationError(f"--dlow {args.dlow} outside [1, {cfg.ffn_dim}]")
    if not 1 <= args.rank <= min(cfg.hidden_dim, args.dlow):
        raise ValidationError(f"--rank {args.rank} outside [1, {min(cfg.hidden_dim, args.dlow)}]")
    if not 0 < args.rho <= 1:
        raise ValidationError(f"--rho {args.rho} outside (0, 1]")
    layers = None
    if args.schedule:
        sched = load_schedule(args.schedule)
        sched.validate_for(cfg.num_layers)
        layers = [l - 1 for l in range(1, cfg.num_layers + 1) if sched.is_skip_layer(l)]
        if not layers:
            raise ValidationError("schedule has no skipping layers to calibrate")
    proxies, calib = calibrate(model, seqs, args.dlow, args.rank, args.rho, layers)
    save_proxies(proxies, args.out)
    lines = []
    for layer, p in sorted(proxies.items()):
        err = proxy_error(model.layers[layer], p, calib[layer])
        lines.append(f"layer {layer + 1}: channels={p.d_low} rank={p.rank} rel_error={err:.6f}")
    print("\n".join(lines))
    Path(args.out + ".summary.txt").write_text(f"seed={seed}\n" + "\n".join(lines) + "\n")
    manifest.write(Path(args.out + ".manifest.json"))
    return EXIT_OK


def _run_one(model, sched, proxies, ids, gen, baseline):
    effective = SkipSchedule.disabled() if baseline else sched
    with count_flops() as counter:
        out = prefill(model, effective, ids, proxies, trace=False)
    tokens = generate(model, effective, ids, gen, proxies)
    stages = []
    for rec in out.records:
        if rec.pruned_to is not None:
            stages.append({"layer": rec.layer, "candidates_before": int(rec.candidates.size), "candidates_after": int(rec.pruned_to.size)})
    cfg = model.config
    return {
        "prompt_len": len(ids),
        "generated": tokens,
        "prefill": {
            "layers": [
                {
                    "layer": r.layer,
                    "skip": r.skip,
                    "candidates": int(r.candidates.size),
                    "mha_active": int(r.mha_active.size),
                    "ffn_active": int(r.ffn_active.size),
                }
                for r in out.records
            ],
            "stage_prunes": stages,
            "cache_lengths": out.cache.lengths(),
            "kv_bytes": measured_bytes(out.cache, cfg),
            "kv_bytes_predicted": predict_bytes(effective, cfg, len(ids)),
            "kv_bytes_full": full_bytes(cfg, len(ids)),
            "flops": {k: counter[k] for k in ("block", "pap", "ltp")},
        },
    }


def cmd_run(args) -> int:
    seed = _seed(args)
    manifest = RunManifest(
        "run", seed, model=args.model, schedule=args.schedule, proxy=args.proxy,
        prompt_ids=args.prompt_ids, output=args.out_dir, flags=_flags(args),
    )
    manifest.check_inputs()
    model = load_model(args.model)
    sched = load_schedule(args.schedule) if args.schedule else SkipSchedule.disabled()
    sched.validate_for(model.config.num_layers)
    proxies = load_proxies(args.proxy) if args.proxy else None
    if proxies is not None:
        for layer, p in proxies.items():
            if p.hidden_dim != model.config.hidden_dim or layer >= model.config.num_layers:
                raise ValidationError("proxy file does not match the model")
    prompts = read_token_file(args.prompt_ids, model.config.vocab_size)
    results = []
    for ids in prompts:
        res = _run_one(model, sched, proxies, ids, args.gen, args.baseline)
        if args.compare_baseline and not args.baseline:
            ref = generate(model, None, ids, args.gen)
            res["baseline_generated"] = ref
            res["divergence_position"] = divergence_position(res["generated"], ref)
        results.append(res)
        print(" ".join(map(str, res["generated"])))
    out = _out_dir(args)
    if out is not None:
        summary = {"seed": seed, "baseline": args.baseline, "schedule": sched.to_text().strip().splitlines(), "prompts": results}
        (out / "run_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        manifest.write(out / "manifest.json")
    return EXIT_OK


def _bench_config(args) -> ModelConfig:
    if args.model:
        return load_model(args.model).config
    if args.preset:
        cfg = CONFIG_PRESETS[args.preset]
        return cfg
    raise ValidationError("give --model or --preset")


def cmd_bench(args) -> int:
    seed = _seed(args)
    if not (args.flops or args.memory):
        raise ValidationError("choose --flops and/or --memory")
    manifest = RunManifest("bench", seed, model=args.model, schedule=args.schedule, output=args.out_dir, flags=_flags(args))
    manifest.check_inputs()
    cfg = _bench_config(args)
    sched = _schedule(args)
    sched.validate_for(cfg.num_layers)
    lengths = [int(x) for x in args.lengths.split(",")]
    if any(n < 1 for n in lengths):
        raise ValidationError("lengths must be positive")
    heads = args.accounting_heads
    proxy = (args.dlow, args.rank) if args.dlow and args.rank else None
    out = _out_dir(args) or Path(".")
    if args.memory:
        rows = []
        for n in lengths:
            full = full_bytes(cfg, n, heads)
            spts = predict_bytes(sched, cfg, n, heads)
            rows.append([n, full, spts, f"{100.0 * (1 - spts / full):.2f}"])
            print(f"N={n}: full {full / 2**30:.2f} GB, skipping {spts / 2**30:.2f} GB, saving {rows[-1][3]}%")
        _write_csv(out / "memory.csv", ["N", "full_bytes", "spts_bytes", "saving_pct"], rows)
    if args.flops:
        rows = []
        for n in lengths:
            r = flops_report(sched, cfg, n, args.gen, proxy)
            rows.append([
                n, r.prefill.baseline, r.prefill.spts, r.prefill.block, r.prefill.pap, r.prefill.ltp,
                f"{r.reduction_ratio:.4f}", r.decode.baseline, r.decode.spts, f"{r.e2e_ratio:.4f}",
            ])
            print(f"N={n}: prefill reduction {r.reduction_ratio:.3f}x, prefill+decode {r.e2e_ratio:.3f}x")
        _write_csv(
            out / "flops.csv",
            ["N", "baseline_prefill", "spts_prefill", "spts_block", "spts_pap", "spts_ltp",
             "prefill_ratio", "baseline_decode", "spts_decode", "e2e_ratio"],
            rows,
        )
    manifest.write(out / "manifest.json")
    return EXIT_OK


def cmd_diag(args) -> int:
    seed = _seed(args)
    if not args.fidelity:
        raise ValidationError("choose a diagnostic (--fidelity)")
    manifest = RunManifest(
        "diag", seed, model=args.model, schedule=args.schedule, proxy=args.proxy,
        prompt_ids=args.prompt_ids, output=args.out_dir, flags=_flags(args),
    )
    manifest.check_inputs()
    model = load_model(args.model)
    sched = load_schedule(args.schedule)
    sched.validate_for(model.config.num_layers)
    proxies = load_proxies(args.proxy) if args.proxy else None
    ids = read_token_file(args.prompt_ids, model.config.vocab_size)[0]
    rep = fidelity_report(model, sched, ids, proxies, args.jaccard_k)
    out = _out_dir(args) or Path(".")
    cols = ["layer", "skip", "candidates", "mha_active", "ffn_active", "spts_vs_base_cos", "mha_block_cos", "ffn_block_cos"]
    _write_csv(out / "fidelity.csv", cols, [[_fmt(r[c]) for c in cols] for r in rep.rows])
    cols3 = ["layer", "coverage_90", "coverage_95", "jaccard_topk", "jaccard_active"]
    _write_csv(out / "attention_stats.csv", cols3, [[_fmt(r[c]) for c in cols3] for r in rep.attention_stats])
    (out / "logit_divergence.txt").write_text(f"seed={seed}\nmax_abs_logit_diff={rep.logit_max_abs_diff:.8g}\n")
    print(f"max |logit diff| = {rep.logit_max_abs_diff:.6g}")
    manifest.write(out / "manifest.json")
    return EXIT_OK


def _fmt(v):
    return f"{v:.6f}" if isinstance(v, float) else v


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# --- parser -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="write a seeded toy model")
    g.add_argument("--layers", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--heads", type=int, required=True)
    g.add_argument("--kv-heads", type=int)
    g.add_argument("--head-dim", type=int)
    g.add_argument("--ffn", type=int, required=True)
    g.add_argument("--vocab", type=int, required=True)
    g.add_argument("--rope-theta", type=float, default=10000.0)
    g.add_argument("--norm-eps", type=float, default=1e-5)
    g.add_argument("--dtype-bytes", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_model)

    t = sub.add_parser("gen-tokens", help="write seeded synthetic token-id sequences")
    t.add_argument("--vocab", type=int)
    t.add_argument("--model")
    t.add_argument("--count", type=int, default=8)
    t.add_argument("--length", type=int, default=64)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_gen_tokens)

    c = sub.add_parser("calibrate", help="build low-rank FFN proxies")
    c.add_argument("--model", required=True)
    c.add_argument("--tokens", required=True)
    c.add_argument("--dlow", type=int, required=True)
    c.add_argument("--rank", type=int, required=True)
    c.add_argument("--rho", type=float, default=DEFAULT_RHO)
    c.add_argument("--schedule", help="only calibrate this schedule's skipping layers")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("run", help="prefill with skipping and greedy decode")
    r.add_argument("--model", required=True)
    r.add_argument("--schedule")
    r.add_argument("--prompt-ids", required=True)
    r.add_argument("--gen", type=int, default=16)
    r.add_argument("--proxy")
    r.add_argument("--baseline", action="store_true", help="ignore the schedule and run the full model")
    r.add_argument("--compare-baseline", action="store_true", help="also decode with the full model and report divergence")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out-dir")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bench", help="closed-form FLOPs and KV-cache memory")
    b.add_argument("--flops", action="store_true")
    b.add_argument("--memory", action="store_true")
    b.add_argument("--model")
    b.add_argument("--preset", choices=sorted(CONFIG_PRESETS))
    b.add_argument("--schedule")
    b.add_argument("--schedule-preset", choices=sorted(PRESETS))
    b.add_argument("--lengths", default="8192,16384,24576,32768")
    b.add_argument("--gen", type=int, default=16)
    b.add_argument("--dlow", type=int)
    b.add_argument("--rank", type=int)
    b.add_argument("--accounting-heads", type=int)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out-dir")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("diag", help="fidelity and attention diagnostics")
    d.add_argument("--fidelity", action="store_true")
    d.add_argument("--model", required=True)
    d.add_argument("--schedule", required=True)
    d.add_argument("--prompt-ids", required=True)
    d.add_argument("--proxy")
    d.add_argument("--jaccard-k", type=int)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out-dir")
    d.set_defaults(func=cmd_diag)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValidationError, SptsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ArithmeticError, MemoryError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
