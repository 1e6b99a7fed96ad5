"""Synthetic data processes and task samplers for training and evaluation.

Every generator is a pure function of its parameters and an owned
:class:`~arcnp.core.RngStream`; identical seeds reproduce identical tasks.
Tasks serialize to a line-delimited JSON format (one task per line) used
for fixture files and cross-implementation comparisons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .accel import lv_integrate
from .core import FactorizationError, RngStream, Task, cholesky_with_jitter
from .oracles import FunctionMixture, GpModel, Kernel, gram

__all__ = [
    "TaskSpec",
    "SawtoothParams",
    "LotkaVolterraParams",
    "LvTrajectory",
    "AudioParams",
    "sample_gp_task",
    "sample_sawtooth_task",
    "sample_mixture_task",
    "simulate_lotka_volterra",
    "sample_predprey_task",
    "sample_function_mixture_task",
    "sample_audio_task",
    "task_to_json",
    "task_from_json",
    "write_tasks_jsonl",
    "read_tasks_jsonl",
]


@dataclass(frozen=True)
class TaskSpec:
    """How to cut a process draw into a task.

    ``context_size`` is an inclusive uniform range; ``split`` only applies
    to predator-prey tasks and selects interpolation, forecasting or
    reconstruction.
    """

    context_size: tuple[int, int] = (0, 30)
    target_size: int = 50
    input_range: tuple[float, float] = (-2.0, 2.0)
    split: str | None = None

    def __post_init__(self):
        lo, hi = self.context_size
        if lo < 0 or hi < lo:
            raise ValueError("context_size must be a nondecreasing pair of nonnegative ints")
        if self.target_size < 0:
            raise ValueError("target_size must be nonnegative")
        if self.input_range[0] >= self.input_range[1]:
            raise ValueError("input_range lower bound must be below the upper bound")
        if self.split is not None and self.split not in ("interpolation", "forecasting", "reconstruction"):
            raise ValueError(f"unknown split {self.split!r}")

    def draw_context_size(self, rng: RngStream) -> int:
        lo, hi = self.context_size
        return int(rng.integers(lo, hi + 1))


def sample_gp_task(model: GpModel, spec: TaskSpec, rng: RngStream) -> Task:
    """One task from a GP: uniform inputs, one joint draw of noisy outputs.

    If the Gram matrix cannot be factorized (pathological duplicate inputs
    at zero noise), the inputs are resampled once before erroring.
    """
    n_ctx = spec.draw_context_size(rng)
    n = n_ctx + spec.target_size
    for attempt in range(2):
        xs = rng.uniform(*spec.input_range, n)
        cov = gram(model.kernel, xs, xs) + model.noise_variance * np.eye(n)
        try:
            chol, _ = cholesky_with_jitter(cov)
        except FactorizationError:
            if attempt == 1:
                raise
            continue
        ys = chol @ rng.standard_normal(n)
        return Task(context_x=xs[:n_ctx], context_y=ys[:n_ctx],
                    target_x=xs[n_ctx:], target_y=ys[n_ctx:])
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class SawtoothParams:
    """Frequency, direction (+1 or -1) and phase of one sawtooth draw."""

    frequency: float
    direction: float
    phase: float


def _sawtooth_eval(params: SawtoothParams, x: np.ndarray, variant: str) -> np.ndarray:
    if variant == "additive":
        return np.mod(params.frequency * params.direction * x + params.phase, 1.0)
    if variant == "subtractive":
        return np.mod(params.frequency * (params.direction * x - params.phase), 1.0)
    raise ValueError(f"unknown sawtooth variant {variant!r}")


SAWTOOTH_FREQ_RANGES = {"additive": (2.0, 4.0), "subtractive": (3.0, 5.0)}


def _draw_sawtooth_params(rng: RngStream, variant: str,
                          freq_range: tuple[float, float] | None = None) -> SawtoothParams:
    if variant not in SAWTOOTH_FREQ_RANGES:
        raise ValueError(f"unknown sawtooth variant {variant!r}")
    lo, hi = freq_range if freq_range is not None else SAWTOOTH_FREQ_RANGES[variant]
    freq = float(rng.uniform(lo, hi))
    if variant == "additive":
        phase = float(rng.uniform(0.0, 1.0))
    else:
        phase = float(rng.uniform(min(1.0 / freq, 1.0), 1.0))
    direction = float(rng.choice(np.array([-1.0, 1.0])))
    return SawtoothParams(freq, direction, phase)


def sample_sawtooth_task(spec: TaskSpec, rng: RngStream, variant: str = "additive",
                         freq_range: tuple[float, float] | None = None) -> Task:
    """One noiseless sawtooth task; outputs always lie in [0, 1).

    ``"additive"`` draws frequency from [2, 4] and adds the phase inside the
    mod; ``"subtractive"`` draws frequency from [3, 5] and shifts the input
    by the phase (drawn from [1/frequency, 1]).  ``freq_range`` overrides
    the variant's frequency band, e.g. for curriculum stages.
    """
    params = _draw_sawtooth_params(rng, variant, freq_range)
    n_ctx = spec.draw_context_size(rng)
    xs = rng.uniform(*spec.input_range, n_ctx + spec.target_size)
    ys = _sawtooth_eval(params, xs, variant)
    return Task(context_x=xs[:n_ctx], context_y=ys[:n_ctx],
                target_x=xs[n_ctx:], target_y=ys[n_ctx:])


MIXTURE_COMPONENTS = ("eq", "matern52", "weakly_periodic", "sawtooth")


def sample_mixture_task(spec: TaskSpec, rng: RngStream, noise_variance: float = 0.05) -> Task:
    """One task drawn from the four-process mixture (equal probability each).

    The three GP components carry observation noise; the sawtooth does not.
    """
    kind = str(rng.choice(np.array(MIXTURE_COMPONENTS)))
    if kind == "sawtooth":
        return sample_sawtooth_task(spec, rng, variant="additive")
    model = GpModel(kernel=Kernel(kind=kind), noise_variance=noise_variance)
    return sample_gp_task(model, spec, rng)


@dataclass(frozen=True)
class LotkaVolterraParams:
    """Rates, noise and scale of the stochastic predator-prey dynamics.

    ``x0``/``y0`` are the populations at the start of the burn-in period.
    """

    alpha: float
    beta: float
    gamma: float
    delta: float
    sigma: float
    eta: float
    x0: float
    y0: float
    nu: float = 1.0 / 6.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "delta", "eta", "x0", "y0", "nu"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @classmethod
    def sample(cls, rng: RngStream) -> "LotkaVolterraParams":
        """Draw parameters from the configured sampling distributions."""
        return cls(
            alpha=float(rng.uniform(0.2, 0.8)),
            beta=float(rng.uniform(0.04, 0.08)),
            gamma=float(rng.uniform(0.8, 1.2)),
            delta=float(rng.uniform(0.04, 0.08)),
            sigma=float(rng.uniform(0.5, 10.0)),
            eta=float(rng.uniform(1.0, 5.0)),
            x0=float(rng.uniform(5.0, 100.0)),
            y0=float(rng.uniform(5.0, 100.0)),
        )

    @classmethod
    def midpoint(cls, sigma: float = 5.25) -> "LotkaVolterraParams":
        """Midpoints of all sampling ranges; handy for deterministic checks."""
        return cls(alpha=0.5, beta=0.06, gamma=1.0, delta=0.06,
                   sigma=sigma, eta=3.0, x0=52.5, y0=52.5)


@dataclass(frozen=True)
class LvTrajectory:
    """Dense predator-prey trajectory after burn-in, already scaled."""

    times: np.ndarray
    prey: np.ndarray
    predator: np.ndarray

    def series(self, channel: int) -> np.ndarray:
        return self.prey if channel == 0 else self.predator


def simulate_lotka_volterra(params: LotkaVolterraParams, rng: RngStream,
                            step: float = 0.01, t_start: float = -10.0,
                            t_end: float = 100.0, drift: str = "classical") -> LvTrajectory:
    """Euler-Maruyama simulation on a dense grid, discarding the burn-in.

    The default ``"classical"`` drift has the predator population decay at
    its own rate (-gamma * Y); ``"literal"`` couples the decay to the prey
    population (-gamma * X) instead, which collapses the predator series
    onto the population floor for most parameter draws.  Populations are
    clamped at a small positive floor, and the output is scaled by ``eta``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if drift not in ("classical", "literal"):
        raise ValueError(f"unknown drift form {drift!r}")
    n_steps = int(round((t_end - t_start) / step))
    increments = (rng.standard_normal((n_steps, 2)) if params.sigma > 0
                  else np.zeros((n_steps, 2)))
    path = lv_integrate((params.x0, params.y0), params.alpha, params.beta, params.gamma,
                        params.delta, params.sigma, params.nu, step, increments,
                        literal_drift=(drift == "literal"))
    times = t_start + step * np.arange(n_steps + 1)
    keep = times >= 0.0
    return LvTrajectory(times=times[keep], prey=params.eta * path[keep, 0],
                        predator=params.eta * path[keep, 1])


def _retain_series(traj: LvTrajectory, channel: int, rng: RngStream,
                   retain_range: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(retain_range[0], retain_range[1] + 1))
    idx = np.sort(rng.choice(traj.times.size, size=n, replace=False))
    return traj.times[idx], traj.series(channel)[idx]


def sample_predprey_task(traj: LvTrajectory, spec: TaskSpec, rng: RngStream,
                         retain_range: tuple[int, int] = (150, 250)) -> Task:
    """Cut a predator-prey trajectory into a task under the requested split.

    Between 150 and 250 grid points are retained per series, with counts
    and locations sampled separately for prey and predator.  Channel 0 is
    prey, channel 1 predator.  Infeasible forecast split points are
    resampled.
    """
    if spec.split is None:
        raise ValueError("predprey tasks require spec.split")
    tx0, ty0 = _retain_series(traj, 0, rng, retain_range)
    tx1, ty1 = _retain_series(traj, 1, rng, retain_range)
    xs = np.concatenate([tx0, tx1])
    ys = np.concatenate([ty0, ty1])
    ch = np.concatenate([np.zeros(tx0.size, int), np.ones(tx1.size, int)])

    if spec.split == "interpolation":
        n = xs.size
        n_tgt = int(rng.integers(1, n))
        tgt = np.zeros(n, bool)
        tgt[rng.choice(n, size=n_tgt, replace=False)] = True
    elif spec.split == "forecasting":
        tgt = _forecast_mask(xs, rng)
    else:  # reconstruction
        split_ch = int(rng.integers(0, 2))
        on_ch = ch == split_ch
        tgt = np.zeros(xs.size, bool)
        tgt[on_ch] = _forecast_mask(xs[on_ch], rng)
    return Task(context_x=xs[~tgt], context_y=ys[~tgt], context_channel=ch[~tgt],
                target_x=xs[tgt], target_y=ys[tgt], target_channel=ch[tgt])


def _forecast_mask(times: np.ndarray, rng: RngStream, max_tries: int = 100) -> np.ndarray:
    lo, hi = times.min(), times.max()
    for _ in range(max_tries):
        t_split = rng.uniform(lo, hi)
        mask = times >= t_split
        if 0 < mask.sum() < times.size:
            return mask
    raise RuntimeError("could not find a feasible forecast split point")


def sample_function_mixture_task(mix: FunctionMixture, spec: TaskSpec, rng: RngStream) -> Task:
    """One task from the function mixture: a single component draw plus its noise."""
    comp = int(rng.choice(len(mix.weights), p=np.asarray(mix.weights)))
    n_ctx = spec.draw_context_size(rng)
    xs = rng.uniform(*spec.input_range, n_ctx + spec.target_size)
    ys = mix.component_means(xs)[comp] + np.sqrt(mix.noise_variances[comp]) * rng.standard_normal(xs.size)
    return Task(context_x=xs[:n_ctx], context_y=ys[:n_ctx],
                target_x=xs[n_ctx:], target_y=ys[n_ctx:])


@dataclass(frozen=True)
class AudioParams:
    """Two sinusoid frequencies, a repetition period and a decay constant."""

    omega1: float
    omega2: float
    period: float
    decay: float
    noise_variance: float = 0.001

    @classmethod
    def sample(cls, rng: RngStream) -> "AudioParams":
        return cls(
            omega1=float(rng.uniform(50.0, 70.0)),
            omega2=float(rng.uniform(50.0, 70.0)),
            period=float(rng.uniform(0.75, 1.25)),
            decay=float(rng.uniform(0.1, 0.3)),
        )


def audio_waveform(params: AudioParams, x: np.ndarray) -> np.ndarray:
    """Periodic repetition of a decaying two-sinusoid burst, period ``params.period``.

    The burst is truncated to one period, so each input sees exactly one
    repetition: the one whose offset lands in [0, period).
    """
    x = np.asarray(x, float)
    t = np.mod(x, params.period)
    return np.exp(-t / params.decay) * (np.sin(params.omega1 * t) + np.sin(params.omega2 * t))


def sample_audio_task(spec: TaskSpec, rng: RngStream,
                      params: AudioParams | None = None) -> Task:
    """One audio-like task: a random burst waveform plus small observation noise."""
    if params is None:
        params = AudioParams.sample(rng)
    n_ctx = spec.draw_context_size(rng)
    xs = rng.uniform(*spec.input_range, n_ctx + spec.target_size)
    ys = audio_waveform(params, xs) + np.sqrt(params.noise_variance) * rng.standard_normal(xs.size)
    return Task(context_x=xs[:n_ctx], context_y=ys[:n_ctx],
                target_x=xs[n_ctx:], target_y=ys[n_ctx:])


def task_to_json(task: Task) -> str:
    """Serialize a task to the line format: context [[x, y, channel]], target_x [[x, channel]]."""
    payload = {
        "context": [[float(x), float(y), int(c)] for x, y, c in
                    zip(task.context_x, task.context_y, task.context_channel)],
        "target_x": [[float(x), int(c)] for x, c in zip(task.target_x, task.target_channel)],
        "target_y": None if task.target_y is None else [float(y) for y in task.target_y],
    }
    return json.dumps(payload, separators=(",", ":"))


def task_from_json(line: str) -> Task:
    payload = json.loads(line)
    ctx = np.asarray(payload["context"], float).reshape(-1, 3)
    tgt = np.asarray(payload["target_x"], float).reshape(-1, 2)
    return Task(
        context_x=ctx[:, 0], context_y=ctx[:, 1], context_channel=ctx[:, 2].astype(int),
        target_x=tgt[:, 0], target_channel=tgt[:, 1].astype(int),
        target_y=None if payload.get("target_y") is None else np.asarray(payload["target_y"], float),
    )


def write_tasks_jsonl(path, tasks: Iterable[Task]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for task in tasks:
            fh.write(task_to_json(task) + "\n")


def read_tasks_jsonl(path) -> Iterator[Task]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield task_from_json(line)
