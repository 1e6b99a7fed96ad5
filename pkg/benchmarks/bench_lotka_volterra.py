"""Timing comparison of the SDE integrator's numba and numpy paths.

Run as: python benchmarks/bench_lotka_volterra.py [n_trajectories]

Both paths consume identical pre-drawn noise and produce bit-identical
trajectories; this script only measures speed.  The package-level backend
selection (ARCNP_BACKEND) does not matter here because both
implementations are timed explicitly.
"""

import sys
import time

import numpy as np

from arcnp.accel import _lv_steps, _lv_steps_numpy, backend_name, lv_integrate
from arcnp.core import RngStream
from arcnp.generators import LotkaVolterraParams


def run_path(step_fn, params, increments_batch, dt):
    out = np.empty((increments_batch.shape[1] + 1, 2))
    start = time.perf_counter()
    for increments in increments_batch:
        out[0] = (params.x0, params.y0)
        bad = step_fn(out, params.alpha, params.beta, params.gamma, params.delta,
                      params.sigma, params.nu, dt, increments, False)
        assert bad == -1
    return time.perf_counter() - start


def main(argv):
    n_traj = int(argv[1]) if len(argv) > 1 else 50
    dt = 0.01
    n_steps = 11_000  # 110 simulated years
    params = LotkaVolterraParams.midpoint(sigma=2.0)
    rng = RngStream(0)
    increments = rng.standard_normal((n_traj, n_steps, 2))

    print(f"backend selected by environment: {backend_name()}")
    print(f"{n_traj} trajectories x {n_steps} steps")

    paths = {"numpy": _lv_steps_numpy}
    if _lv_steps is not _lv_steps_numpy:
        lv_integrate((params.x0, params.y0), params.alpha, params.beta, params.gamma,
                     params.delta, params.sigma, params.nu, dt, increments[0])  # warm up jit
        paths["numba"] = _lv_steps

    timings = {}
    for name, fn in paths.items():
        timings[name] = run_path(fn, params, increments, dt)
        rate = n_traj * n_steps / timings[name]
        print(f"  {name:>6}: {timings[name]:8.3f} s  ({rate / 1e6:7.2f} M steps/s)")
    if len(timings) == 2:
        print(f"  speedup: {timings['numpy'] / timings['numba']:.1f}x")

    out_a = np.empty((n_steps + 1, 2))
    out_b = np.empty((n_steps + 1, 2))
    out_a[0] = out_b[0] = (params.x0, params.y0)
    for name, fn in paths.items():
        target = out_a if name == "numpy" else out_b
        fn(target, params.alpha, params.beta, params.gamma, params.delta,
           params.sigma, params.nu, dt, increments[0], False)
    if len(paths) == 2:
        print(f"  bit-identical outputs: {np.array_equal(out_a, out_b)}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
