# benchmark_link_attention.py
import argparse
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

# Add the project root to sys.path
project_root = Path(__file__).parent.parent
sys.path.insert(0, str(project_root))

from core.nn.layers import MultiHeadSelfAttention  # noqa: E402
from core.nn.tensor import Tensor, no_grad  # noqa: E402
from core.relation_predictor import attention_mask, build_candidates, neighbourhood_bound  # noqa: E402


def _timed(fn, repeats: int):
    best, out = float("inf"), None
    for _ in range(repeats):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


def benchmark(n: int, tile_size: int, d_cand: float, d_l: float, channels: int, heads: int,
              repeats: int, seed: int) -> dict:
    """Sparse and dense link attention over the candidates of n random keypoints in one tile."""
    rng = np.random.default_rng([seed, n])
    xy = rng.uniform(0, tile_size, size=(n, 2))
    cands = build_candidates(xy, d_cand)
    mask = attention_mask(cands, xy, d_l)
    attn = MultiHeadSelfAttention("bench.link_attn", channels, heads, seed)
    x = Tensor(rng.normal(size=(len(cands), channels)))
    rows, cols = mask.pairs
    blocked = mask.dense()

    with no_grad():
        sparse_s, sparse_out = _timed(lambda: attn.sparse(x, rows, cols), repeats)
        dense_s, dense_out = _timed(lambda: attn(x, mask=blocked), repeats)
    return {
        "keypoints": n,
        "candidates": len(cands),
        "attended_pairs": mask.attended_pairs(),
        "dense_pairs": len(cands) ** 2,
        "row_bound": neighbourhood_bound(cands, xy, d_l),
        "max_row": int(np.asarray(mask.allowed.sum(axis=1)).max()) if len(cands) else 0,
        "sparse_s": sparse_s,
        "dense_s": dense_s,
        "max_abs_diff": float(np.abs(sparse_out.data - dense_out.data).max()) if len(cands) else 0.0,
    }


def main():
    parser = argparse.ArgumentParser(description="Time sparse vs dense link attention.")
    parser.add_argument("--sizes", type=int, nargs="+", default=[25, 50, 100, 200])
    parser.add_argument("--tile-size", type=int, default=256)
    parser.add_argument("--d-cand", type=float, default=40.0)
    parser.add_argument("--d-l", type=float, default=50.0)
    parser.add_argument("--channels", type=int, default=64)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--repeats", type=int, default=3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="Optional CSV path for the results table")
    args = parser.parse_args()

    print("⏱️ Benchmarking link attention...")
    rows = [benchmark(n, args.tile_size, args.d_cand, args.d_l, args.channels, args.heads, args.repeats, args.seed)
            for n in args.sizes]
    table = pd.DataFrame(rows)
    table["speedup"] = table["dense_s"] / table["sparse_s"]
    print(table.to_string(index=False))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.out, index=False)
        print(f"📤 Wrote {args.out}")
    print("✅ Done.")


if __name__ == "__main__":
    main()
