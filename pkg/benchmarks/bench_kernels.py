"""Time the compiled kernels against their numpy fallbacks.

Run with ``python3 benchmarks/bench_kernels.py [--size N] [--repeat R]``.
Each line reports the best-of-R wall time per call for both backends and
the speedup, after checking that the two backends agree.
"""

from __future__ import annotations

import argparse
import timeit
from typing import Callable

import numpy as np

from koiterfsi import _kernels_py
from koiterfsi.geometry import make_cutoff

try:
    from koiterfsi import _kernels
except ImportError:  # pragma: no cover
    _kernels = None


def cases(size: int, rng: np.random.Generator) -> dict[str, Callable[[object], object]]:
    profile = make_cutoff(0.5)
    s = rng.uniform(-1.1, 0.1, size)
    rho, d = rng.uniform(0.0, 1.0, size), rng.uniform(-0.3, 0.3, size)
    push_args = [rng.normal(size=size) for _ in range(10)]
    push_args[5] = 1.0 + 0.1 * np.abs(push_args[5])
    grid = rng.normal(size=(2, 60, 120))
    xs, zs = rng.uniform(0.0, 1.0, size), rng.uniform(-1.0, 1.0, size)
    return {
        "cutoff_eval": lambda m: m.cutoff_eval(s, profile.plateau, profile.ramp, 1),
        "radial_inverse": lambda m: m.radial_inverse(rho, d, 1.0, 1.0, profile.plateau, profile.ramp, 1e-13, 50),
        "stream_push": lambda m: m.stream_push(*push_args),
        "bilinear": lambda m: m.bilinear(grid, 0.0, 1 / 59, -1.0, 2 / 119, xs, zs),
    }


def best_time(call: Callable[[], object], repeat: int) -> float:
    number = 5
    return min(timeit.repeat(call, number=number, repeat=repeat)) / number


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=200_000, help="points per call")
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    if _kernels is None:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")

    print(f"{'kernel':<16}{'cython [ms]':>14}{'numpy [ms]':>14}{'speedup':>10}")
    for name, run in cases(args.size, np.random.default_rng(0)).items():
        np.testing.assert_allclose(np.asarray(run(_kernels)), np.asarray(run(_kernels_py)), rtol=1e-12, atol=1e-12)
        t_fast = best_time(lambda: run(_kernels), args.repeat)
        t_slow = best_time(lambda: run(_kernels_py), args.repeat)
        print(f"{name:<16}{1e3 * t_fast:>14.3f}{1e3 * t_slow:>14.3f}{t_slow / t_fast:>10.1f}")


if __name__ == "__main__":
    main()
