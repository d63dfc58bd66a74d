"""Inference state size and decode speed against context length, for a softmax and a
linear model of the same shape (random weights are fine: only shapes and timing matter).

    python scripts/bench_memory.py --lengths 128,512,2048
"""

import argparse

from supra.analysis import bench_state_memory, format_bench
from supra.attention import preset
from supra.model import ModelConfig, init_model


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lengths", default="128,512,2048")
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--n-heads", type=int, default=4)
    args = ap.parse_args()
    lengths = [int(x) for x in args.lengths.split(",")]
    for kind in ("softmax", "supra"):
        cfg = ModelConfig(d_model=args.d_model, n_heads=args.n_heads, max_seq=max(lengths),
                          attention=preset(kind, args.d_model, args.n_heads))
        rows = bench_state_memory(init_model(cfg, seed=0), lengths)
        print(f"== {kind}")
        print(format_bench(rows, machine=False))
        print(format_bench(rows, machine=True))


if __name__ == "__main__":
    main()
