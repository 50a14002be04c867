"""Time the numba and numpy backends on the hot kernels.

Usage: python3 benchmarks/bench_backends.py [--repeat 5] [--quick]

Each kernel is warmed up once per backend (numba compiles on first call),
then timed as the best of ``--repeat`` runs.  Outputs of the two backends are
compared before timing.
"""
import argparse
import time

import numpy as np

from capture_kernels import _backend
from capture_kernels.kernel_propagation import McConfig, attention_ntk_update, embed_covariance
from capture_kernels.softmax import softmax_rows
from capture_kernels.tasks import build_grammar


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(quick):
    rng = np.random.default_rng(0)
    t = 16 if quick else 32
    n = 2048 if quick else 8192
    scores = rng.standard_normal((n, t, t))
    a1 = softmax_rows(scores)
    a2 = softmax_rows(rng.standard_normal((n, t, t)))
    x = rng.standard_normal((2 * t, 8))
    c = x @ x.T / 8
    sig, theta = c[:t, t:], 1.5 * c[:t, t:]
    g = build_grammar(0)
    toks = rng.integers(0, g.n_terms, size=48 if quick else 96)
    mask, rules = g.term_mask(), g.binary
    st = embed_covariance(x[:t], x[t:])
    mc = McConfig(n_mc=n // 4, seed=1)
    return {
        f"softmax_rows n={n} T={t}": lambda: _backend.softmax_rows_batch(scores),
        f"attention_moments nngp n={n} T={t}": lambda: _backend.attention_moments(a1, a2, sig),
        f"attention_moments ntk n={n} T={t}": lambda: _backend.attention_moments(a1, a2, sig, theta),
        f"cyk_chart T={len(toks)}": lambda: _backend.cyk_chart(toks, mask, rules, g.n_vars),
        f"attention_ntk_update n_mc={n // 4} T={t}": lambda: attention_ntk_update(st, mc).theta12,
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if not _backend.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    table = []
    for name, fn in cases(args.quick).items():
        res, secs = {}, {}
        for backend in ("numpy", "numba"):
            prev = _backend.set_backend(backend)
            try:
                res[backend] = fn()  # warm-up and result capture
                secs[backend] = best_of(fn, args.repeat)
            finally:
                _backend.set_backend(prev)
        a, b = res["numpy"], res["numba"]
        flat_a = a if isinstance(a, tuple) else (a,)
        flat_b = b if isinstance(b, tuple) else (b,)
        if not all(np.allclose(u, v, rtol=1e-9, atol=1e-12) for u, v in zip(flat_a, flat_b)):
            raise SystemExit(f"{name}: backends disagree")
        table.append((name, secs["numpy"], secs["numba"]))
    width = max(len(n) for n, _, _ in table)
    print(f"{'kernel':<{width}}  {'numpy [ms]':>11}  {'numba [ms]':>11}  {'speed-up':>8}")
    for name, tn, tb in table:
        print(f"{name:<{width}}  {1e3 * tn:11.2f}  {1e3 * tb:11.2f}  {tn / tb:8.2f}")


if __name__ == "__main__":
    main()
