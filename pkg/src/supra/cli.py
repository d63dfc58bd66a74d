"""``supra`` command line: every workflow behind one executable.

Exit codes: 1 config/geometry error, 2 I/O or checkpoint error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import config as C
from .analysis import GeometryError, bench_state_memory, compare, emit_grid_image, extract_attention, \
    format_bench, grid_to_text
from .attention import preset
from .checkpoint import Checkpoint, CheckpointError, load, save, supra_convert
from .data import decode, load_corpus, prompt_tokens
from .model import generate, init_model, parse_sampler
from .train import NumericAbort, evaluate_perplexity, plan_dict, train

log = logging.getLogger("supra")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


def _run_dir(cfg: dict, kind: str) -> Path:
    root = Path(cfg["out_dir"])
    stamp = time.strftime("%Y%m%d-%H%M%S")
    d = root / f"{stamp}-{kind}-seed{cfg['seed']}"
    n = 1
    while d.exists():
        d = root / f"{stamp}-{kind}-seed{cfg['seed']}-{n}"
        n += 1
    d.mkdir(parents=True)
    return d


def _data(cfg: dict, max_seq: int):
    return load_corpus(cfg["corpus"] or None, max_seq=max_seq, seed=cfg["seed"], split=1.0 - cfg["val_fraction"])


def _fit(model, cfg: dict, plan, run: Path) -> dict:
    data = _data(cfg, model.cfg.max_seq)
    val = data.val[:cfg["val_chunks"]]
    (run / "config.resolved").write_text(C.dump(cfg))
    (run / "plan.json").write_text(json.dumps(plan_dict(plan), indent=2))

    def progress(rec):
        if rec["step"] % 50 == 0 or rec["step"] == plan.total_steps:
            log.info("step %d lr %.3g loss %.4f", rec["step"], rec["lr"], rec["loss"])

    _, tlog = train(model, plan, data, val, log_path=run / "train_log.jsonl", on_step=progress)
    ck = Checkpoint.from_model(model)
    save(run / "model.ckpt", ck)
    summary = {"steps": plan.total_steps, "final_loss": tlog.final_loss(),
               "val_perplexity": evaluate_perplexity(model, val) if len(val) else None,
               "num_params": ck.num_params(), "evals": tlog.evals}
    (run / "summary.json").write_text(json.dumps(summary, indent=2))
    print(f"run directory {run}")
    print(f"checkpoint {run / 'model.ckpt'}")
    if summary["val_perplexity"] is not None:
        print(f"perplexity {summary['val_perplexity']:.6f}")
    return summary


def cmd_pretrain(args) -> int:
    cfg = C.load(args.config, args.set)
    mcfg = C.model_config(cfg)
    plan = C.train_plan(cfg)
    model = init_model(mcfg, seed=cfg["seed"], dtype=C.numpy_dtype(cfg))
    _fit(model, cfg, plan, _run_dir(cfg, "pretrain"))
    return 0


def cmd_convert(args) -> int:
    src = load(args.source)
    d, h = src.config.d_model, src.config.n_heads
    over = {"decay": args.decay} if args.decay else {}
    target = preset(args.attention, d, h, src.config.rope_base, **over)
    out, report = supra_convert(src, target)
    save(args.to, out)
    side = Path(str(args.to) + ".surgery.json")
    side.write_text(json.dumps(report.to_dict(), indent=2))
    print(f"converted {args.source} -> {args.to} ({args.attention})")
    print(f"params {report.params_before} -> {report.params_after} (+{report.params_after - report.params_before})")
    print(f"surgery report {side}")
    return 0


def cmd_uptrain(args) -> int:
    cfg = C.load(args.config, args.set)
    src = load(args.source, upcast=cfg["dtype"] == "f64")
    if not src.config.attention.is_linear:
        raise C.ConfigError(f"{args.source} uses softmax attention; run `supra convert` first")
    plan = C.train_plan(cfg)
    if args.freeze == "new-only":
        plan = replace(plan, freeze="base_frozen")
    if args.staged is not None:
        if args.staged <= 0:
            raise C.ConfigError("--staged N needs N > 0")
        if args.freeze != "none":
            raise C.ConfigError("--staged and --freeze new-only are exclusive")
        plan = replace(plan, freeze="staged", stage_boundary=args.staged, total_steps=args.staged + plan.total_steps)
    cfg.update({"freeze": plan.freeze, "stage_boundary": plan.stage_boundary, "total_steps": plan.total_steps})
    # architecture comes from the checkpoint; echo it so the resolved config is truthful
    mc = src.config
    cfg.update({"d_model": mc.d_model, "n_layers": mc.n_layers, "n_heads": mc.n_heads, "d_ff": mc.d_ff,
                "max_seq": mc.max_seq, "rope_base": mc.rope_base, "decay": mc.attention.decay})
    model = src.to_model(C.numpy_dtype(cfg))
    _fit(model, cfg, plan, _run_dir(cfg, "uptrain"))
    return 0


def cmd_generate(args) -> int:
    model = load(args.ckpt).to_model()
    prompt = prompt_tokens(args.prompt)
    toks = generate(model, prompt, args.n, parse_sampler(args.sampler), args.mode)
    print(decode(toks).decode("utf-8", errors="replace"))
    return 0


def cmd_eval(args) -> int:
    ck = load(args.ckpt)
    model = ck.to_model()
    data = load_corpus(args.corpus, max_seq=ck.config.max_seq, seed=args.seed, split=1.0 - args.val_fraction)
    chunks = data.val[:args.val_chunks] if args.val_chunks else data.val
    print(f"perplexity {evaluate_perplexity(model, chunks, mode=args.mode):.6f}")
    return 0


def _input_tokens(spec: str) -> list[int]:
    p = Path(spec)
    raw = p.read_bytes() if p.is_file() else spec.encode("utf-8")
    return prompt_tokens(raw)


def cmd_compare_attn(args) -> int:
    a, b = load(args.ckpt_a).to_model(), load(args.ckpt_b).to_model()
    toks = _input_tokens(args.input)
    max_seq = min(a.cfg.max_seq, b.cfg.max_seq)
    if len(toks) > max_seq:
        toks = toks[:max_seq]
    grid = compare(extract_attention(a, toks, str(args.ckpt_a)), extract_attention(b, toks, str(args.ckpt_b)),
                   args.metric, args.normalized)
    sys.stdout.write(grid_to_text(grid))
    if args.out:
        img, side = emit_grid_image(grid, args.out)
        print(f"wrote {img} and {side}", file=sys.stderr)
    return 0


def cmd_bench(args) -> int:
    model = load(args.ckpt).to_model()
    lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    if any(n <= 0 for n in lengths):
        raise C.ConfigError("--lengths must be positive integers")
    rows = bench_state_memory(model, lengths)
    if args.format in ("human", "both"):
        sys.stdout.write(format_bench(rows, machine=False))
    if args.format == "both":
        sys.stdout.write("\n")
    if args.format in ("tsv", "both"):
        sys.stdout.write(format_bench(rows, machine=True))
    if args.tsv:
        Path(args.tsv).write_text(format_bench(rows, machine=True))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    results = run_selftest(fault=args.fault, only=args.only or None)
    failed = [k for k, ok in results.items() if not ok]
    print(f"{len(results) - len(failed)}/{len(results)} invariants passed")
    if failed:
        print("failed: " + ", ".join(failed))
    return 1 if failed else 0


def cmd_config(args) -> int:
    sys.stdout.write(C.dump(C.load(args.config, args.set)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="supra", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("pretrain", help="train a model from scratch")
    with_config(sp)
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("convert", help="add kernel MLP and GroupNorm weights to a softmax checkpoint")
    sp.add_argument("--from", dest="source", required=True)
    sp.add_argument("--to", required=True)
    sp.add_argument("--attention", default="supra", choices=("supra", "t2r", "elu1"))
    sp.add_argument("--decay", choices=("none", "lightning", "retnet"))
    sp.set_defaults(fn=cmd_convert)

    sp = sub.add_parser("uptrain", help="continue training a converted checkpoint")
    with_config(sp)
    sp.add_argument("--from", dest="source", required=True)
    sp.add_argument("--freeze", default="none", choices=("none", "new-only"))
    sp.add_argument("--staged", type=int, metavar="N",
                    help="train only new weights for N steps, then everything for total_steps")
    sp.set_defaults(fn=cmd_uptrain)

    sp = sub.add_parser("generate", help="continue a prompt")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--prompt", default="")
    sp.add_argument("--n", type=int, default=64)
    sp.add_argument("--mode", default="recurrent", choices=("recurrent", "parallel"))
    sp.add_argument("--sampler", default="greedy", help="greedy | temperature:T[:SEED]")
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("eval", help="held-out perplexity")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--corpus")
    sp.add_argument("--mode", default="parallel", choices=("parallel", "recurrent"))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--val-fraction", type=float, default=0.1)
    sp.add_argument("--val-chunks", type=int, default=64, help="0 evaluates every held-out chunk")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("compare-attn", help="per-head attention similarity between two checkpoints")
    sp.add_argument("--ckpt-a", required=True)
    sp.add_argument("--ckpt-b", required=True)
    sp.add_argument("--input", required=True, help="text, or a path to a text file")
    sp.add_argument("--metric", default="cosine", choices=("cosine", "singular_value_distance"))
    sp.add_argument("--normalized", action="store_true")
    sp.add_argument("--out", help="PGM image path; a .txt grid is written next to it")
    sp.set_defaults(fn=cmd_compare_attn)

    sp = sub.add_parser("bench", help="inference state size and decode speed by context length")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--lengths", default="128,512,2048")
    sp.add_argument("--format", default="both", choices=("human", "tsv", "both"))
    sp.add_argument("--tsv", help="also write the tab-separated table here")
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("selftest", help="run the invariant suite")
    sp.add_argument("--fault", help="activate a named fault to confirm the suite catches it")
    sp.add_argument("--only", action="append", help="run just this invariant (repeatable)")
    sp.set_defaults(fn=cmd_selftest)

    sp = sub.add_parser("config", help="print the resolved, annotated configuration")
    with_config(sp)
    sp.set_defaults(fn=cmd_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except NumericAbort as e:
        print(f"error: numeric abort at {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (C.ConfigError, GeometryError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
