"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from narcp import kernels


def cases(rng):
    n = 4096
    px, py = rng.normal(size=n), rng.normal(size=n)
    heading = rng.uniform(-np.pi, np.pi, n)
    speed = rng.uniform(0, 8, n)
    turn = rng.choice([-0.52, -0.17, 0.0, 0.17, 0.52], n)
    delta = rng.choice([-0.5, 0.0, 0.5], n)
    rewards = rng.normal(size=(128, 16))
    values = rng.normal(size=(129, 16))
    dones = (rng.random((128, 16)) < 0.01).astype(np.float64)
    S, A = 20, 5
    P = rng.dirichlet(np.ones(S), size=(S, A))
    R = rng.uniform(-1, 1, (S, A))
    term = np.zeros(S)
    return {
        "wrap_angle": lambda m: m.wrap_angle(heading * 3.0),
        "unicycle_advance": lambda m: m.unicycle_advance(px, py, heading, speed, turn, delta, 0.1, 0.0, 8.0),
        "gae": lambda m: m.gae(rewards, values, dones, 0.99, 0.95),
        "value_iteration": lambda m: m.value_iteration(P, R, term, 0.9, 1e-10, 100000),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    mods = kernels.backends()
    work = cases(np.random.default_rng(0))
    print(f"{'kernel':<18}" + "".join(f"{name:>14}" for name in mods) + f"{'speedup':>10}")
    for name, fn in work.items():
        times = {}
        for bname, mod in mods.items():
            times[bname] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e6
        row = f"{name:<18}" + "".join(f"{times[b]:>12.1f}us" for b in mods)
        if "cython" in times:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
