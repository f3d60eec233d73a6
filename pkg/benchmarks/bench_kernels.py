#!/usr/bin/env python3
"""Benchmarks the compiled kernels against the pure numpy fallback.

Covers the two kernels the extension provides (k-d tree radius pairs and
scatter-sum) plus an end-to-end training step on each backend.

Run: python benchmarks/bench_kernels.py [--particles N] [--seconds S]
Force the fallback for an end-to-end feel with GNS_PURE_PYTHON=1.
"""

import argparse
import time

import numpy as np


def timeit(fn, seconds):
    fn()
    count = 0
    start = time.perf_counter()
    while time.perf_counter() - start < seconds:
        fn()
        count += 1
    return (time.perf_counter() - start) / count


def bench_kernels(n, seconds):
    from gns import _pykernels, backend
    from gns.graph import build_kdtree

    if not backend.COMPILED:
        print("note: compiled extension unavailable; comparing pure against itself")
    compiled = backend.kernels
    rng = np.random.default_rng(0)
    pts = rng.random((n, 2))
    tree = build_kdtree(pts)
    radius = float(np.sqrt(10.0 / (np.pi * n)))  # ~10 neighbors

    rows = []
    for name, impl in (("compiled", compiled), ("pure", _pykernels)):
        t = timeit(lambda: impl.tree_radius_pairs(*tree._arrays(), radius), seconds)
        rows.append((f"radius_pairs[{n}]", name, t))
    for name, impl in (("compiled", compiled), ("pure", _pykernels)):
        center = pts[0]
        t = timeit(lambda: impl.tree_radius_query(*tree._arrays(), center, radius),
                   seconds)
        rows.append((f"radius_query[{n}]", name, t))

    edges = 12 * n
    src = rng.standard_normal((edges, 128)).astype(np.float32)
    idx = np.sort(rng.integers(0, n, edges))
    for name, impl in (("compiled", compiled), ("pure", _pykernels)):
        out = np.zeros((n, 128), dtype=np.float32)

        def run(impl=impl, out=out):
            out[:] = 0
            impl.scatter_sum(src, idx, out)

        rows.append((f"scatter_sum[{edges}x128]", name, timeit(run, seconds)))
    return rows


def bench_train_step(n, seconds):
    from gns import features as F
    from gns import model as M
    from gns import tensor as T
    from gns import backend

    rng = np.random.default_rng(1)
    base = rng.random((n, 2)) * 0.9 + 0.05
    hist = base[None] + 0.003 * rng.standard_normal((6, n, 2))
    state = F.ParticleState(hist, np.full(n, 1), np.array([1e-4]), [0, 0], [1, 1])
    radius = float(np.sqrt(10.0 / (np.pi * n)))
    cfg = M.GnsConfig(latent_size=64, mlp_hidden_size=64, message_passing_steps=5,
                      connectivity_radius=radius)
    model = M.init_model(cfg, seed=0)
    stats = F.NormStats(2, 5, F.RELATIVE, 1)
    target = 1e-4 * rng.standard_normal((n, 2))

    def step():
        edges = M.build_edges(model, state.positions)
        with T.Tape() as tape:
            sample = F.featurize(state, edges, F.RELATIVE, radius, stats,
                                 model.embedding, target_accel=target,
                                 update_stats=True)
            loss = T.mse_loss(M.forward(sample, model), sample.target_accel,
                              sample.loss_mask)
            tape.backward(loss)
        T.zero_grads(model.params)

    return [(f"train_step[{n} particles, width 64]", backend.name(),
             timeit(step, seconds))]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--particles", type=int, default=1000)
    parser.add_argument("--seconds", type=float, default=1.0)
    args = parser.parse_args()

    rows = bench_kernels(args.particles, args.seconds)
    rows += bench_train_step(min(args.particles, 200), args.seconds)

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'backend':>8}  {'time':>12}")
    baseline = {}
    for kernel, name, t in rows:
        note = ""
        if name == "compiled":
            baseline[kernel] = t
        elif kernel in baseline:
            note = f"  ({t / baseline[kernel]:.1f}x compiled)"
        print(f"{kernel:<{width}}  {name:>8}  {t * 1e3:10.3f} ms{note}")


if __name__ == "__main__":
    main()
