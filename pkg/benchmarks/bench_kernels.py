"""Compare the compiled and numpy scatter-add backends.

Two views:
  * microbenchmark of scatter_add_rows itself over a size grid
  * end-to-end GGNN forward+backward wall time under each backend,
    selected the same way production code selects it (METAGRAPH_KERNELS)

Usage: python benchmarks/bench_kernels.py [--quick]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from metagraph import _kernels

MICRO_GRID = [
    # rows, segments, width
    (1_000, 200, 64),
    (10_000, 2_000, 128),
    (100_000, 20_000, 128),
    (100_000, 5_000, 256),
]
QUICK_GRID = MICRO_GRID[:2]


def _backends():
    impls = {"py": _kernels._scatter_add_rows_py}
    try:
        from metagraph._ckernels import scatter_add_rows as compiled
    except ImportError:
        print("compiled extension not built; microbenchmark covers numpy only")
    else:
        impls["c"] = compiled
    return impls


def _time(fn, values, ids, segments, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(values, ids, segments)
        best = min(best, time.perf_counter() - t0)
    return best


def micro(grid, repeats=5):
    impls = _backends()
    rng = np.random.default_rng(0)
    print(f"{'rows':>8} {'segs':>7} {'width':>5} "
          + " ".join(f"{name + ' (ms)':>10}" for name in impls)
          + ("   speedup" if len(impls) == 2 else ""))
    for rows, segments, width in grid:
        values = rng.normal(size=(rows, width))
        ids = rng.integers(0, segments, size=rows)
        times = {name: _time(fn, values, ids, segments, repeats)
                 for name, fn in impls.items()}
        out = next(iter(impls.values()))(values, ids, segments)
        for fn in impls.values():
            np.testing.assert_allclose(fn(values, ids, segments), out,
                                       rtol=1e-12)
        row = f"{rows:>8} {segments:>7} {width:>5} "
        row += " ".join(f"{times[name] * 1e3:>10.3f}" for name in impls)
        if len(times) == 2:
            row += f"   {times['py'] / times['c']:>6.1f}x"
        print(row)


def _timed_forward_backward():
    """Subprocess body: one number (seconds) on stdout."""
    from metagraph.chemgraph import MolecularGraph
    from metagraph.ggnn import ModelConfig, forward_batch, init_params
    from metagraph.tensor import Tape, grad, reduce_sum

    rng = np.random.default_rng(0)
    config = ModelConfig(layers=3, feature_dim=75, hidden_dim=128,
                         num_edge_types=4, dropout_p=0.0)
    graphs = []
    for _ in range(32):
        n = int(rng.integers(12, 24))
        edges = [(i, i + 1, int(rng.integers(0, 4))) for i in range(n - 1)]
        feats = rng.normal(size=(n, 75))
        graphs.append(MolecularGraph(num_nodes=n, edges=edges,
                                     node_features=feats))
    params = init_params(config, rng)
    forward_batch(graphs, params, config)  # warm-up
    t0 = time.perf_counter()
    rounds = 3
    for _ in range(rounds):
        tape = Tape()
        watched = params.watch(tape)
        logits = forward_batch(graphs, watched, config)
        loss = reduce_sum(logits * logits)
        grad(loss, [watched[name] for name in watched.names()])
    print((time.perf_counter() - t0) / rounds)


def end_to_end():
    print("\nend-to-end GGNN forward+backward (32 graphs, 3 layers, width 128)")
    script = os.path.abspath(__file__)
    for backend in ("py", "c"):
        env = dict(os.environ, METAGRAPH_KERNELS=backend)
        proc = subprocess.run([sys.executable, script, "--timed-e2e"],
                              capture_output=True, text=True, env=env)
        if proc.returncode != 0:
            print(f"  {backend}: unavailable ({proc.stderr.strip().splitlines()[-1]})")
            continue
        print(f"  {backend}: {float(proc.stdout) * 1e3:.1f} ms per round")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--quick", action="store_true",
                        help="small grid only")
    parser.add_argument("--timed-e2e", action="store_true",
                        help=argparse.SUPPRESS)
    args = parser.parse_args()
    if args.timed_e2e:
        _timed_forward_backward()
        return
    print(f"active backend: {_kernels.BACKEND}")
    micro(QUICK_GRID if args.quick else MICRO_GRID)
    end_to_end()


if __name__ == "__main__":
    main()
