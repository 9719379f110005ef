"""Time the numpy fallback against the compiled kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each row reports the best-of-``repeat`` wall time per call for both backends
and checks the outputs are bit-identical.
"""
import argparse
import time

import numpy as np

from fvgnn import kernels
from fvgnn.fvm import Field, rollout
from fvgnn.gnn import GraphBatch, MpsModel, predict
from fvgnn.mesh import fourier_dt_max, generate_irregular_mesh, generate_regular_mesh


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def cases(rng):
    mesh = generate_irregular_mesh(0, 500)
    big = generate_regular_mesh(60)  # 7200 cells
    g = big.dual
    x = rng.normal(size=big.n_cells)
    ghost = rng.normal(size=len(g.senders))
    rows = rng.normal(size=(len(g.senders), 32))
    f = Field(rng.uniform(-1, 1, mesh.n_cells), rng.uniform(-1, 1, mesh.n_cells), 1.0,
              0.5 * fourier_dt_max(mesh))
    model = MpsModel(2, 2, 32, seed=0)
    batch = GraphBatch.from_graph(mesh, f)
    return {
        "stencil_sum (7200 cells)":
            lambda: kernels.stencil_sum(x, g.receivers, g.senders, g.edge_area / g.edge_delta, ghost, big.n_cells),
        "segment_sum (32 wide)":
            lambda: kernels.segment_sum(rows, g.receivers, big.n_cells),
        "first-order rollout x50 (500 cells)":
            lambda: rollout(mesh, f, "first-order", 50)[-1].T,
        "crank-nicolson rollout x10":
            lambda: rollout(mesh, f, "crank-nicolson", 10)[-1].T,
        "GNN forward (L=2, d=32)":
            lambda: predict(model, batch),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy fallback is available")
    before = kernels.BACKEND
    results = {}
    try:
        for name in backends:
            kernels.use_backend(name)
            for label, fn in cases(np.random.default_rng(0)).items():
                results.setdefault(label, {})[name] = best_of(fn, args.repeat)
    finally:
        kernels.use_backend(before)
    print(f"{'case':38s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s} identical")
    for label, r in results.items():
        tp, op = r["python"]
        if "cython" in r:
            tc, oc = r["cython"]
            print(f"{label:38s} {tp * 1e3:10.3f} {tc * 1e3:10.3f} {tp / tc:8.2f} {np.array_equal(op, oc)}")
        else:
            print(f"{label:38s} {tp * 1e3:10.3f} {'-':>10s} {'-':>8s} -")


if __name__ == "__main__":
    main()
