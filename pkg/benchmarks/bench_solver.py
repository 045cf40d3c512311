"""Compare the compiled and pure-Python coordinate-descent kernels.

    python3 benchmarks/bench_solver.py [--repeat 3] [--quick]

Each workload is run once per kernel with identical inputs; the table shows
the best wall time over ``--repeat`` runs, the speedup, and the largest
coefficient difference between the two kernels.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from ggreg import _backend, _sgl_py
from ggreg import graph_regression as gr
from ggreg import simulation as sim
from ggreg import solver

try:
    from ggreg import _sgl_core
except ImportError:  # extension not built
    _sgl_core = None


def single_fit(n, sizes, seed=0):
    rng = np.random.default_rng(seed)
    d = int(sum(sizes))
    X = rng.standard_normal((n, d))
    y = X @ np.where(rng.random(d) < 0.1, rng.normal(0, 1, d), 0.0) + rng.standard_normal(n)
    prob = solver.DesignProblem.from_block_sizes(X, y, sizes, range(1, len(sizes)))
    lam = 0.1 * solver.lambda_max(prob)
    pen = solver.PenaltyConfig(lam, lam)

    def run():
        return solver.fit(prob, pen).coefficients

    return run


def node_path(n, p, q, seed=0):
    truth, data = sim.simulate(sim.SimConfig(n=n, p=p, q=q, q_e=min(5, q), seed=seed))
    Z = data.X - data.U @ truth.gamma.T

    def run():
        return gr.select_tuning_bic(Z, data.U, 0).beta

    return run


def workloads(quick):
    items = [
        ("fit n=100 d=40 (5 groups)", single_fit(100, [8] * 5)),
        ("fit n=400 d=600 (25 groups)", single_fit(400, [24] * 25)),
        ("BIC path n=200 p=10 q=10", node_path(200, 10, 10)),
    ]
    if not quick:
        items.append(("BIC path n=400 p=25 q=50", node_path(400, 25, 50)))
    return items


def time_kernel(kernel, run, repeat):
    _backend.solve = kernel.solve
    best, out = np.inf, None
    for _ in range(repeat):
        start = time.perf_counter()
        out = run()
        best = min(best, time.perf_counter() - start)
    return best, out


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--quick", action="store_true", help="skip the largest workload")
    args = parser.parse_args(argv)
    if _sgl_core is None:
        raise SystemExit("compiled kernel not built; run `pip install -e . --no-build-isolation` first")
    original = _backend.solve
    rows = []
    try:
        for name, run in workloads(args.quick):
            t_c, b_c = time_kernel(_sgl_core, run, args.repeat)
            t_p, b_p = time_kernel(_sgl_py, run, args.repeat)
            rows.append((name, t_c, t_p, t_p / t_c, float(np.max(np.abs(b_c - b_p))) if b_c.size else 0.0))
    finally:
        _backend.solve = original
    header = f"{'workload':32s} {'cython s':>10s} {'python s':>10s} {'speedup':>8s} {'max |diff|':>11s}"
    print(header)
    print("-" * len(header))
    for name, t_c, t_p, speed, diff in rows:
        print(f"{name:32s} {t_c:10.4f} {t_p:10.4f} {speed:8.1f} {diff:11.2e}")


if __name__ == "__main__":
    main()
