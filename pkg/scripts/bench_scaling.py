"""Time one Euler step against the number of qubits n and the number of mean-field particles N.

Usage: python3 scripts/bench_scaling.py [--max-n 8] [--N 1000 2000 4000 8000]

Prints the median wall time per step and the ratio to the previous row. The N-particle
density model should cost about 4x more per added qubit, and the particle method should
scale linearly in N.
"""

import argparse
import time

import numpy as np

from mfbelavkin.models import BelavkinMeanField, BelavkinNParticle, EmpiricalMean, ModelParams
from mfbelavkin.quantum import bloch_compose
from mfbelavkin.sde import NoisePlan, TimeGrid, simulate

DT = 1e-3


def step_time(model, x0, n_paths, n_steps, seed=0):
    stamps = []
    simulate(model, x0, TimeGrid(n_steps * DT, DT), NoisePlan(seed, model.n_channels, DT, range(n_paths)),
             record_every=10**9, on_step=lambda k, s, m: stamps.append(time.perf_counter()))
    return float(np.median(np.diff(stamps)))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--max-n", type=int, default=8)
    ap.add_argument("--N", type=int, nargs="+", default=[1000, 2000, 4000, 8000])
    ap.add_argument("--steps", type=int, default=30)
    args = ap.parse_args(argv)
    params = ModelParams.qubit()

    print("n  seconds/step/system  ratio")
    prev = None
    for n in range(2, args.max_n + 1):
        model = BelavkinNParticle(params, n)
        paths = max(1, 4 ** (args.max_n - n))
        t = step_time(model, model.initial_state(bloch_compose([1.0, 0.0, 0.0])), paths, args.steps) / paths
        print(f"{n:<2} {t:.3e}            {'' if prev is None else f'{t / prev:.2f}'}")
        prev = t

    print("\nN      seconds/step  ratio")
    prev = None
    x0 = bloch_compose([0.25, -0.25, 0.0])
    for N in args.N:
        t = step_time(BelavkinMeanField(params, None, EmpiricalMean()), x0, N, 3 * args.steps)
        print(f"{N:<6} {t:.3e}     {'' if prev is None else f'{t / prev:.2f}'}")
        prev = t


if __name__ == "__main__":
    main()
