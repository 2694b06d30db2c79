"""Time the t-SNE kernels: compiled (Cython) vs numpy fallback.

    python3 benchmarks/bench_tsne.py --sizes 150 500 1000 --repeat 3
"""
import argparse
import time

import numpy as np

from echo_esc import _kernels
from echo_esc.tsne import squared_distances


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[150, 500, 1000])
    ap.add_argument("--perplexity", type=float, default=30.0)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = _kernels.available()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'M':>6} {'kernel':<14} " + " ".join(f"{b:>10}" for b in backends) + "   speedup")
    for m in args.sizes:
        X = rng.normal(size=(m, 32))
        D = squared_distances(X)
        P, _, _, _ = backends["python"].conditional_p(D, args.perplexity)
        P = (P + P.T) / (2 * m)
        Y = rng.normal(scale=1e-2, size=(m, 2))
        for kernel, call in (
            ("conditional_p", lambda k: k.conditional_p(D, args.perplexity)),
            ("kl_gradient", lambda k: k.kl_gradient(P, Y, 1.0)),
        ):
            t = {name: best_of(lambda: call(k), args.repeat) for name, k in backends.items()}
            ratio = f"{t['python'] / t['cython']:8.2f}x" if "cython" in t else "       -"
            print(f"{m:>6} {kernel:<14} " + " ".join(f"{t[b] * 1e3:>8.1f}ms" for b in backends) + f"  {ratio}")


if __name__ == "__main__":
    main()
