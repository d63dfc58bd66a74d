"""Desk-scale uptraining ablation: pretrain a softmax model, convert it, and uptrain
each variant for the same number of steps. Prints a perplexity table (human and TSV).

    python scripts/run_ablation.py --out runs/ablation
"""

import argparse
import json
import logging
import time
from pathlib import Path

from supra.checkpoint import Checkpoint, save
from supra.experiments import AblationSetup, run_ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--pretrain-steps", type=int, default=1000)
    ap.add_argument("--uptrain-steps", type=int, default=500)
    ap.add_argument("--variants", default="supra,new_only,t2r,staged")
    ap.add_argument("--corpus")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    setup = AblationSetup(seed=args.seed, pretrain_steps=args.pretrain_steps, uptrain_steps=args.uptrain_steps)
    t0 = time.time()
    res = run_ablation(setup, tuple(args.variants.split(",")), args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save(out / "base.ckpt", Checkpoint.from_model(res.base))
    for name, m in res.models.items():
        save(out / f"{name}.ckpt", Checkpoint.from_model(m))

    rows = [("base (softmax)", res.base_ppl), ("converted, no uptraining", res.converted_ppl)]
    rows += [(k, v) for k, v in res.ppl.items()]
    print(f"{'model':<28}{'val ppl':>10}")
    for k, v in rows:
        print(f"{k:<28}{v:>10.4f}")
    tsv = "model\tval_ppl\n" + "".join(f"{k}\t{v!r}\n" for k, v in rows)
    (out / "ablation.tsv").write_text(tsv)
    (out / "setup.json").write_text(json.dumps(vars(setup), indent=2))
    print(f"\n{tsv}\nwall time {time.time() - t0:.0f}s, artifacts in {out}")


if __name__ == "__main__":
    main()
