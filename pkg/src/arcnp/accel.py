"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen by the ``ARCNP_BACKEND`` environment variable:
``"numba"`` (require the jit path), ``"numpy"`` (force the fallback) or
``"auto"`` (default: numba when importable).  Both paths consume
pre-drawn noise increments and produce bit-identical trajectories, so the
choice of backend never affects results, only speed.
``benchmarks/bench_lotka_volterra.py`` compares the two.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["backend_name", "lv_integrate"]

POP_FLOOR = 1e-6


def _select_backend() -> str:
    choice = os.environ.get("ARCNP_BACKEND", "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"ARCNP_BACKEND must be auto, numba or numpy, got {choice!r}")
    if choice == "numpy":
        return "numpy"
    try:
        import numba  # noqa: F401
    except ImportError:
        if choice == "numba":
            raise
        return "numpy"
    return "numba"


_BACKEND = _select_backend()


def backend_name() -> str:
    """The kernel backend in use, ``"numba"`` or ``"numpy"``."""
    return _BACKEND


def _lv_steps_numpy(out, alpha, beta, gamma, delta, sigma, nu, dt, increments, literal_drift):
    floor = POP_FLOOR
    sqrt_dt = dt**0.5
    x = out[0, 0]
    y = out[0, 1]
    n = increments.shape[0]
    for k in range(n):
        xc = x if x > floor else floor
        yc = y if y > floor else floor
        decay = -gamma * xc if literal_drift else -gamma * yc
        dx = (alpha * xc - beta * yc * xc) * dt + sigma * xc**nu * sqrt_dt * increments[k, 0]
        dy = (decay + delta * yc * xc) * dt + sigma * yc**nu * sqrt_dt * increments[k, 1]
        x = xc + dx
        y = yc + dy
        if x < floor:
            x = floor
        if y < floor:
            y = floor
        if not (np.isfinite(x) and np.isfinite(y)):
            return k
        out[k + 1, 0] = x
        out[k + 1, 1] = y
    return -1


if _BACKEND == "numba":
    from numba import njit

    _lv_steps = njit(cache=True)(_lv_steps_numpy)
else:
    _lv_steps = _lv_steps_numpy


def lv_integrate(state0: tuple[float, float], alpha: float, beta: float, gamma: float,
                 delta: float, sigma: float, nu: float, dt: float,
                 increments: np.ndarray, literal_drift: bool = False) -> np.ndarray:
    """Euler-Maruyama rollout of the stochastic predator-prey dynamics.

    ``increments`` holds the pre-drawn standard-normal noise, one row per
    step; populations are clamped at a small positive floor before the
    drift and diffusion terms are computed and again after each update.
    Returns an array of shape ``(n_steps + 1, 2)``; raises on a non-finite
    state, reporting the offending step.
    """
    increments = np.ascontiguousarray(increments, dtype=np.float64)
    if increments.ndim != 2 or increments.shape[1] != 2:
        raise ValueError("increments must have shape (n_steps, 2)")
    out = np.empty((increments.shape[0] + 1, 2), dtype=np.float64)
    out[0, 0], out[0, 1] = float(state0[0]), float(state0[1])
    bad = _lv_steps(out, float(alpha), float(beta), float(gamma), float(delta),
                    float(sigma), float(nu), float(dt), increments, bool(literal_drift))
    if bad >= 0:
        raise FloatingPointError(
            f"non-finite population at step {bad} "
            f"(alpha={alpha}, beta={beta}, gamma={gamma}, delta={delta}, sigma={sigma})")
    return out
