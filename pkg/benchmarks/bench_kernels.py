"""Time the numba and numpy variants of the attention and LSTM kernels.

    python benchmarks/bench_kernels.py --repeats 20
"""

import argparse
import time

import numpy as np

from mmfuse import kernels
from mmfuse._jit import HAVE_NUMBA


def _best_of(fn, repeats):
    fn()  # warm-up (and JIT compile)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def cases(T, heads, d, window, K, n, seed):
    rng = np.random.default_rng(seed)
    q, k, v = rng.normal(size=(3, heads, T, d))
    mask = np.ones(T, dtype=bool)
    ctx, w = kernels.local_attention_fwd_numpy(q, k, v, window, mask)
    dctx = rng.normal(size=ctx.shape)
    xp = rng.normal(size=(K, 4 * n))
    wh = 0.1 * rng.normal(size=(n, 4 * n))
    h, c, g = kernels.lstm_fwd_numpy(xp, wh)
    dh = rng.normal(size=h.shape)
    return {
        "attention fwd": (
            lambda: kernels.local_attention_fwd_numpy(q, k, v, window, mask),
            lambda: kernels.local_attention_fwd_jit(q, k, v, window, mask),
        ),
        "attention bwd": (
            lambda: kernels.local_attention_bwd_numpy(dctx, q, k, v, w),
            lambda: kernels.local_attention_bwd_jit(dctx, q, k, v, w, window),
        ),
        "lstm fwd": (lambda: kernels.lstm_fwd_numpy(xp, wh), lambda: kernels.lstm_fwd_jit(xp, wh)),
        "lstm bwd": (
            lambda: kernels.lstm_bwd_numpy(dh, h, c, g, wh),
            lambda: kernels.lstm_bwd_jit(dh, h, c, g, wh),
        ),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--frames", type=int, default=32, help="attention sequence length")
    ap.add_argument("--heads", type=int, default=8)
    ap.add_argument("--head-dim", type=int, default=160)
    ap.add_argument("--window", type=int, default=8)
    ap.add_argument("--steps", type=int, default=16, help="LSTM sequence length")
    ap.add_argument("--hidden", type=int, default=256, help="LSTM hidden size")
    ap.add_argument("--repeats", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    if not HAVE_NUMBA:
        print("numba is not installed; only the numpy path exists")
        return
    table = cases(args.frames, args.heads, args.head_dim, args.window, args.steps, args.hidden, args.seed)
    print(f"{'kernel':<14} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, (np_fn, jit_fn) in table.items():
        t_np = _best_of(np_fn, args.repeats) * 1e3
        t_jit = _best_of(jit_fn, args.repeats) * 1e3
        print(f"{name:<14} {t_np:>10.3f} {t_jit:>10.3f} {t_np / t_jit:>7.2f}x")


if __name__ == "__main__":
    main()
