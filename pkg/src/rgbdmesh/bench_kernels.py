"""Micro-benchmark of the body-model kernels: numpy reference vs compiled.

Run as ``python -m rgbdmesh.bench_kernels``. Reports per-call wall time of
the batched Rodrigues transform and the fused body forward/backward pass for
whichever backends are available.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from . import body
from .kernels import reference


def _load_backends():
    backends = [("numpy", reference)]
    try:
        from .kernels import _speedups

        backends.append(("compiled", _speedups))
    except ImportError:
        pass
    return backends


def _time(fn, repeats: int) -> float:
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=200)
    parser.add_argument("--n-vertices", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    model = body.synth_model(args.seed, args.n_vertices)
    margs = (
        model.template_vertices,
        model.shape_dirs,
        model.joint_regressor_rest,
        model.keypoint_regressor,
        model.skinning_weights,
        model.parents,
    )
    rng = np.random.default_rng(args.seed)
    beta = rng.normal(size=10)
    theta = rng.normal(size=72) * 0.5
    omega = rng.normal(size=(24, 3))
    djoints = rng.normal(size=(14, 3))

    backends = _load_backends()
    if len(backends) == 1:
        print("compiled backend not built; timing the numpy reference only")

    rows = []
    for name, mod in backends:
        t_rod = _time(lambda: mod.rodrigues_batch(omega), args.repeats)

        def fwd():
            return mod.body_forward(*margs, beta, theta)

        t_fwd = _time(fwd, args.repeats)
        cache = fwd()[2]
        t_bwd = _time(lambda: mod.body_backward(*margs, cache, None, djoints), args.repeats)
        rows.append((name, t_rod, t_fwd, t_bwd))

    print(f"n_vertices={args.n_vertices} repeats={args.repeats}")
    print(f"{'backend':<10} {'rodrigues':>12} {'forward':>12} {'backward':>12}")
    for name, t_rod, t_fwd, t_bwd in rows:
        print(f"{name:<10} {t_rod * 1e6:>10.1f}us {t_fwd * 1e6:>10.1f}us {t_bwd * 1e6:>10.1f}us")
    if len(rows) == 2:
        base, fast = rows
        print(
            "speedup: "
            f"rodrigues {base[1] / fast[1]:.1f}x, "
            f"forward {base[2] / fast[2]:.1f}x, "
            f"backward {base[3] / fast[3]:.1f}x"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
