"""Compare the numba kernels with their pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel is run once per backend to warm up (JIT compile for numba),
then timed ``--repeat`` times; the best time is reported together with a
check that both backends return identical results.
"""

import argparse
import time

import numpy as np

from frugalmap import _kernels
from frugalmap.model import forward_sample, random_network, read_network, to_factor_graph


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def case_argmax_rows(rng):
    fg = to_factor_graph(read_network("alarm"))
    hyp = sorted(rng.choice(fg.n_vars, 5, replace=False).tolist())
    fids = sorted({k for h in hyp for k in fg.factors_of[h]})
    rows = forward_sample(fg, rng, 2000)
    hcards = [fg.cards[h] for h in hyp]
    label = f"alarm, |H|=5, {len(rows)} rows"
    return label, lambda b: _kernels.argmax_rows(fg.packed_log, fids, rows, hyp, hcards, backend=b)


def case_enumerate_joint(rng):
    fg = to_factor_graph(random_network(rng, 16, max_card=2, max_parents=3))
    free = list(range(fg.n_vars))
    packed = _kernels.pack([f.scope for f in fg.factors], [f.values for f in fg.factors])
    base = np.zeros(fg.n_vars, np.int64)
    label = "16 binary variables, retain 3"
    return label, lambda b: _kernels.enumerate_joint(packed, base, free, fg.cards, free[:3], fg.cards[:3], backend=b)


def case_anneal_sweep(rng):
    cards = np.array([4] * 8, np.int64)
    strides = np.array([4 ** (7 - i) for i in range(8)], np.int64)
    scores = np.log(rng.random(int(np.prod(cards))))
    n = 200_000
    ks = rng.integers(0, 8, n)
    offs = rng.integers(1, 4, n)
    us = rng.random(n)

    def run(b):
        state = np.array([0, 0, 0, 0, 0, -1], np.int64)
        values = np.array([scores[0], scores[0]])
        _kernels.anneal_sweep(scores, state, values, ks, offs, us, 0.5, strides, cards, backend=b)
        return state.copy()

    return f"4^8 memo, {n} proposals", run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not _kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'kernel':<16} {'case':<32} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}  same")
    for name, make in [("argmax_rows", case_argmax_rows),
                       ("enumerate_joint", case_enumerate_joint),
                       ("anneal_sweep", case_anneal_sweep)]:
        label, fn = make(np.random.default_rng(args.seed))
        same = np.array_equal(fn("numba"), fn("numpy")) if name != "enumerate_joint" \
            else np.allclose(fn("numba"), fn("numpy"), rtol=1e-12, atol=0)
        t_nb = best_of(lambda: fn("numba"), args.repeat)
        t_np = best_of(lambda: fn("numpy"), args.repeat)
        print(f"{name:<16} {label:<32} {t_nb * 1e3:>10.2f} {t_np * 1e3:>10.2f} {t_np / t_nb:>7.1f}x  {same}")


if __name__ == "__main__":
    main()
