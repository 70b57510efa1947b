"""Time the numba kernels against their pure-numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5] [--csv out.csv]

Each case runs through the public API under both backends.  The numba path is
warmed up first so JIT compile time is excluded.  RNG kernels must agree
bit-for-bit across backends; floating-point kernels may differ by summation
order, so they must agree within ``FLOAT_TOL`` relative.
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from kd3lab import _accel
from kd3lab.mixdist import MixParams, mdcl_loss_one_side, perturb_batch
from kd3lab.numerics import Rng, l2_normalize
from kd3lab.selection import select_from_probs

FLOAT_TOL = 1e-10


def _cases():
    rng = Rng(7)
    z1 = l2_normalize(rng.normal(size=(256, 32)))
    z2 = l2_normalize(rng.normal(size=(256, 32)))
    x = rng.normal(size=(256, 16))
    p_t = rng.uniform(size=(7000, 4))
    p_t /= p_t.sum(1, keepdims=True)
    p_s = p_t[::-1].copy()
    return {
        "rng.normal(100k)": lambda: Rng(1).normal(size=100_000),
        "rng.beta_sym(10k)": lambda: Rng(1).beta_sym(0.5, size=10_000),
        "rng.permutation(7000)": lambda: Rng(1).permutation(7000),
        "mdcl_one_side(256x32)": lambda: mdcl_loss_one_side(z1, z2, 0.3),
        "perturb_batch(256x16)": lambda: perturb_batch(x, MixParams(), Rng(1)).xhat,
        "select_from_probs(7000x4)": lambda: select_from_probs(p_t, p_s, 0.5, 0.95).selected,
    }


def _flat(r):
    if isinstance(r, tuple):
        return np.concatenate([np.atleast_1d(np.asarray(a, dtype=np.float64)).ravel() for a in r])
    return np.asarray(r, dtype=np.float64).ravel()


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba not importable; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    for name, fn in _cases().items():
        with _accel.backend("numba"):
            ref = fn()  # compile
            t_nb = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        with _accel.backend("numpy"):
            out = fn()
            t_py = min(timeit.repeat(fn, number=1, repeat=max(1, args.repeat // 2)))
        a, b = _flat(ref), _flat(out)
        diff = float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))) if a.size else 0.0
        ok = diff == 0.0 if name.startswith("rng.") else diff <= FLOAT_TOL
        rows.append((name, t_nb * 1e3, t_py * 1e3, t_py / t_nb, diff, ok))
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s} {'max rel diff':>13s}")
    for name, a, b, s, diff, ok in rows:
        print(f"{name:28s} {a:10.3f} {b:10.3f} {s:8.1f} {diff:13.2e}{'' if ok else '  MISMATCH'}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["kernel", "numba_ms", "numpy_ms", "speedup", "max_rel_diff", "ok"])
            w.writerows(rows)
    return 0 if all(r[5] for r in rows) else 2


if __name__ == "__main__":
    sys.exit(main())
