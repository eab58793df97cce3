"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Each kernel is called once before timing so that compilation is excluded.
Outputs of the two variants are compared before any timing is reported.
"""
import argparse
import time

import numpy as np

from ctd_rals import _kernels as K
from ctd_rals.ctd import stack_factors
from ctd_rals.spde import build_mesh


def _cases(rng):
    d, m, r = 6, 64, 24
    stack = rng.standard_normal((d, r, r))
    x, offsets = stack_factors([rng.standard_normal((m, r)) for _ in range(d)])
    y, _ = stack_factors([rng.standard_normal((m, r + 8)) for _ in range(d)])
    hi, lo = K.dd_gram_product_numpy(x, y, offsets)
    u, v = rng.standard_normal(r), rng.standard_normal(r + 8)
    gk = rng.standard_normal((961, 40))
    sg = rng.random(40)
    whi, wlo = rng.standard_normal((40, r)), 1e-17 * rng.standard_normal((40, r))
    bhi = rng.standard_normal((r, r))
    blo = 1e-17 * rng.standard_normal((r, r))
    c = rng.standard_normal((r, 961))
    spd = bhi @ bhi.T + r * np.eye(r)
    rhi, rlo = rng.standard_normal((961, r)), 1e-17 * rng.standard_normal((961, r))
    mesh = build_mesh(64)
    coef = 1.0 + rng.random(len(mesh.triangles))
    dhi = rng.standard_normal((d, r, r))
    dlo = 1e-17 * rng.standard_normal((d, r, r))
    return {
        "hadamard_except": (stack, 2),
        "p1_stiffness_triplets": (mesh.coords, mesh.triangles, coef),
        "dd_gram_product": (x, y, offsets),
        "dd_quad_form": (u, hi, lo, v),
        "dd_gram": (gk, gk),
        "dd_hadamard_except": (dhi, dlo, 1),
        "dd_rhs": (gk, sg, whi, wlo),
        "dd_refine_residual": (rhi, rlo, bhi, blo, c),
        "dd_cholesky_solve": (spd, blo, rhi, rlo, 1e-30),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12)


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if not K.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return 1
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':24s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, case in _cases(rng).items():
        jit = getattr(K, name + "_jit")
        ref = getattr(K, name + "_numpy")
        if not _same(jit(*case), ref(*case)):
            raise SystemExit(f"{name}: numba and numpy results differ")
        tn = _best(ref, case, args.repeat)
        tj = _best(jit, case, args.repeat)
        print(f"{name:24s} {tn * 1e3:10.3f} {tj * 1e3:10.3f} {tn / tj:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
