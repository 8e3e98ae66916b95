"""Jitted loops vs. vectorized numpy for the two hot kernels.

    python3 benchmarks/bench_kernels.py [--steps 2000] [--repeat 5]

Reports the best-of-N wall time of the controller velocity kernel and of a
full IMM pass over a random-switching trajectory, plus the max difference
between the two backends' outputs.
"""

import argparse
import time

import numpy as np

from swarm_lfo import kernels
from swarm_lfo._accel import use_numba
from swarm_lfo.config import PipelineConfig
from swarm_lfo.dynamics import NUM_CONTROLLERS, build_library
from swarm_lfo.imm import run_imm, transition_matrix


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not use_numba():
        raise SystemExit("numba is disabled (SWARM_LFO_NO_NUMBA); nothing to compare")

    cfg = PipelineConfig()
    lib = build_library(cfg.library)
    kinds, adjs, d2s, thetas, gains = lib.packed()
    goals = lib.default_goals()
    rng = np.random.default_rng(0)
    xs = rng.uniform(-1, 1, (1000, 5, 2))

    def vel(fn):
        def run():
            for x in xs:
                for j in range(NUM_CONTROLLERS):
                    fn(x, kinds[j], adjs[j], d2s[j], thetas[j], gains[j], goals[j], 0.2)
        return run

    vel(kernels.team_velocity_nb)()  # compile
    diff = max(np.max(np.abs(kernels.team_velocity_nb(x, kinds[j], adjs[j], d2s[j], thetas[j], gains[j], goals[j], 0.2)
                             - kernels.team_velocity_np(x, kinds[j], adjs[j], d2s[j], thetas[j], gains[j], goals[j], 0.2)))
               for x in xs[:100] for j in range(NUM_CONTROLLERS))
    t_nb = best_of(vel(kernels.team_velocity_nb), args.repeat)
    t_np = best_of(vel(kernels.team_velocity_np), args.repeat)
    n = len(xs) * NUM_CONTROLLERS
    print(f"team_velocity  numba {1e6 * t_nb / n:8.2f} us/call  numpy {1e6 * t_np / n:8.2f} us/call  "
          f"speedup {t_np / t_nb:5.1f}x  max|diff| {diff:.2e}")

    z = np.cumsum(rng.normal(0, 0.01, (args.steps, 10)), axis=0) + np.tile([0.3, 0.0], 5)
    T = transition_matrix(NUM_CONTROLLERS)
    noise = PipelineConfig().noise
    run = lambda backend: run_imm(z, lib, T, 0.05, noise, vmax=0.2, backend=backend)
    run("numba")  # compile
    a, b = run("numba"), run("numpy")
    diff = float(np.max(np.abs(a.mu - b.mu)))
    t_nb = best_of(lambda: run("numba"), args.repeat)
    t_np = best_of(lambda: run("numpy"), max(1, args.repeat // 2))
    print(f"run_imm        numba {1e3 * t_nb / args.steps:8.3f} ms/step  numpy {1e3 * t_np / args.steps:8.3f} ms/step  "
          f"speedup {t_np / t_nb:5.1f}x  max|dmu| {diff:.2e}")


if __name__ == "__main__":
    main()
