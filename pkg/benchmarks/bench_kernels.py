"""Compiled kernels against the pure-Python fallback.

Kernel-level timings run in-process against both backends.  The end-to-end
timings (a Do-Nothing week and a batch of expert decisions) run in child
processes with ``GRIDRL_KERNELS`` pinned, so every caller picks up the same
backend.

    python benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from gridrl import kernels
from gridrl.chronics import generate_synthetic
from gridrl.grid import load_grid

END_TO_END = r"""
import json, time
from gridrl import kernels
from gridrl.chronics import generate_synthetic
from gridrl.control import expert_action
from gridrl.env import do_nothing_survival
from gridrl.grid import load_grid
from gridrl.harness import ChronicSource, record_danger_states
g = load_grid("case14")
ch = generate_synthetic(g, 0, "easy", 2016)
t0 = time.perf_counter(); do_nothing_survival(g, ch); week = time.perf_counter() - t0
states = record_danger_states(g, ChronicSource(seeds=(0, 1)).load(g), 20)
t0 = time.perf_counter()
for s in states:
    expert_action(s)
expert = (time.perf_counter() - t0) / len(states)
print(json.dumps({"backend": kernels.BACKEND, "do_nothing_week_s": week, "expert_decision_s": expert}))
"""


def _random_topologies(grid, rng, n):
    out = []
    for _ in range(n):
        lo = np.where(rng.random(grid.n_line) < 0.1, 2, 1).astype(np.int8)
        le = np.where(rng.random(grid.n_line) < 0.1, 2, 1).astype(np.int8)
        out.append((lo, le))
    return out


def kernel_timings(repeats):
    grid = load_grid("case14")
    inj = generate_synthetic(grid, 0, "easy", 10).injections(0)
    topos = _random_topologies(grid, np.random.default_rng(0), 200)
    gen_bus = np.ones(grid.n_gen, np.int8)
    load_bus = np.ones(grid.n_load, np.int8)
    cap, n = 4096, 4096
    prefixes = np.random.default_rng(1).random(256)
    rows = {}
    for name, k in kernels.backends().items():
        def solve():
            for lo, le in topos:
                k.dc_network(grid.n_sub, grid.line_or_sub, grid.line_ex_sub, lo, le, grid.gen_sub, gen_bus,
                             grid.load_sub, load_bus, grid.line_x, inj.gen_p, grid.gen_pmax, inj.load_p,
                             grid.slack_gen, 0.2)

        tree = np.zeros(2 * cap)

        def fill():
            for i in range(n):
                k.sumtree_set(tree, cap, i, 1.0 + (i % 7))

        fill()

        def find():
            k.sumtree_find(tree, cap, prefixes * tree[1])

        rows[name] = {
            "dc_network_per_solve_s": min(timeit.repeat(solve, number=1, repeat=repeats)) / len(topos),
            "sumtree_set_per_call_s": min(timeit.repeat(fill, number=1, repeat=repeats)) / n,
            "sumtree_find_per_batch256_s": min(timeit.repeat(find, number=20, repeat=repeats)) / 20,
        }
    return rows


def end_to_end(backend):
    env = dict(os.environ, GRIDRL_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    rows = kernel_timings(args.repeats)
    for name in kernels.backends():
        rows[name].update({k: v for k, v in end_to_end(name).items() if k != "backend"})
    metrics = list(next(iter(rows.values())))
    names = list(rows)
    print(f"{'metric':32s}" + "".join(f"{n:>14s}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for m in metrics:
        line = f"{m:32s}" + "".join(f"{rows[n][m]:14.3e}" for n in names)
        if "cython" in rows:
            line += f"{rows['python'][m] / rows['cython'][m]:11.1f}x"
        print(line)
    if "cython" not in rows:
        print("compiled extension not built; only the Python backend was timed")


if __name__ == "__main__":
    main()
