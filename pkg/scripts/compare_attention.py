"""Attention similarity grids between a softmax checkpoint and a converted one.

Writes all four grids (cosine / singular-value distance, raw / row-normalized)
as PGM images with text sidecars.

    python scripts/compare_attention.py --a runs/ablation/base.ckpt --b runs/ablation/supra.ckpt
"""

import argparse
from pathlib import Path

import numpy as np

from supra.analysis import compare, emit_grid_image, extract_attention
from supra.checkpoint import load
from supra.data import load_corpus, prompt_tokens


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--a", required=True)
    ap.add_argument("--b", required=True)
    ap.add_argument("--out", default="runs/attention")
    ap.add_argument("--text", help="input text; defaults to the first held-out chunk of the bundled corpus")
    args = ap.parse_args()

    a, b = load(args.a).to_model(), load(args.b).to_model()
    seq = min(a.cfg.max_seq, b.cfg.max_seq) - 1
    if args.text:
        toks = prompt_tokens(args.text)[:seq]
    else:
        toks = load_corpus(max_seq=seq + 1).val[0][:seq]
    ma, mb = extract_attention(a, toks, args.a), extract_attention(b, toks, args.b)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for metric in ("cosine", "singular_value_distance"):
        for norm in (False, True):
            grid = compare(ma, mb, metric, norm)
            tag = f"{metric}{'_normalized' if norm else ''}"
            emit_grid_image(grid, out / f"{tag}.pgm")
            print(f"{tag:<34} mean {np.mean(grid.values):.4f}  min {grid.values.min():.4f}  max {grid.values.max():.4f}")
    print(f"grids written to {out}")


if __name__ == "__main__":
    main()
