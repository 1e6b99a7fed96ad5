"""Autoregressive deployment of marginal-prediction models.

Any model exposing "predict Gaussian marginals given (context, target
inputs)" can be rolled out autoregressively: sample a block of target
points, feed the samples back into the conditioning set, repeat.  The same
chain rule gives a joint density: the product of per-step marginal
densities of the observed values.  This module also provides the two-step
noisy-sample/denoise procedure for recovering smooth function samples and
an auxiliary-rollout scheme that enriches single-point marginals into
mixtures.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import LOG_2PI, MarginalPrediction, RngStream, Task
from .neural import CnpModel, cnp_forward
from .oracles import FunctionMixture, GpModel, ideal_cnp_gp, ideal_cnp_mixture

__all__ = [
    "ModelAdapter",
    "IdealCnpGpAdapter",
    "IdealCnpMixtureAdapter",
    "CnpAdapter",
    "Ordering",
    "Trajectory",
    "ContextSizeWarning",
    "ar_sample",
    "ar_logpdf",
    "ar_loglik_spread",
    "smooth_sample",
    "denoise",
    "aux_ar_predict",
    "AuxArPrediction",
]


class ContextSizeWarning(UserWarning):
    """The rollout's conditioning set exceeds the adapter's training regime."""


class ModelAdapter:
    """Uniform marginal-prediction interface consumed by the AR engine.

    ``transform`` names an output transform applied to y before the
    underlying model sees it ("identity" or "log1p"); samples are mapped
    back through the inverse, and densities pick up the Jacobian term.
    ``train_context_max``, when set, declares the largest context size seen
    during training; rollouts beyond it trigger a warning, not an error.
    """

    transform: str = "identity"
    train_context_max: int | None = None

    def predict(self, context_x, context_y, target_x,
                context_channel=None, target_channel=None) -> MarginalPrediction:
        """Gaussian marginals at the targets, in the transformed output space.

        ``context_y`` is always in raw output space; implementations must
        apply the transform themselves before encoding.
        """
        raise NotImplementedError

    # output transform plumbing ------------------------------------------------
    def to_model_space(self, y: np.ndarray) -> np.ndarray:
        if self.transform == "identity":
            return np.asarray(y, float)
        if self.transform == "log1p":
            return np.log1p(np.asarray(y, float))
        raise ValueError(f"unknown transform {self.transform!r}")

    def to_data_space(self, z: np.ndarray) -> np.ndarray:
        if self.transform == "identity":
            return np.asarray(z, float)
        return np.expm1(np.asarray(z, float))

    def log_jacobian(self, y: np.ndarray) -> np.ndarray:
        """log |d model-space / d data-space| evaluated at raw outputs."""
        if self.transform == "identity":
            return np.zeros(np.shape(y))
        return -np.log1p(np.asarray(y, float))


class IdealCnpGpAdapter(ModelAdapter):
    """Marginals of the exact GP posterior: the infinite-data factorized predictor."""

    def __init__(self, model: GpModel):
        self.model = model

    def predict(self, context_x, context_y, target_x,
                context_channel=None, target_channel=None) -> MarginalPrediction:
        return ideal_cnp_gp(self.model, context_x, context_y, target_x)


class IdealCnpMixtureAdapter(ModelAdapter):
    """Moment-matched marginals of the function-mixture posterior."""

    def __init__(self, mixture: FunctionMixture):
        self.mixture = mixture

    def predict(self, context_x, context_y, target_x,
                context_channel=None, target_channel=None) -> MarginalPrediction:
        return ideal_cnp_mixture(self.mixture, context_x, context_y, target_x)


class CnpAdapter(ModelAdapter):
    """A trained deep-set CNP behind the adapter interface."""

    def __init__(self, model: CnpModel, transform: str = "identity",
                 train_context_max: int | None = None):
        self.model = model
        self.transform = transform
        self.train_context_max = train_context_max

    def predict(self, context_x, context_y, target_x,
                context_channel=None, target_channel=None) -> MarginalPrediction:
        return cnp_forward(self.model, context_x, self.to_model_space(context_y),
                           target_x, context_channel, target_channel)


@dataclass(frozen=True)
class Ordering:
    """How target points are visited: "random", "given", or "left-to-right".

    A random ordering with an explicit ``seed`` is reproducible regardless
    of the stream passed to the operation; without one it consumes the
    operation's stream.
    """

    kind: str = "random"
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("random", "given", "left-to-right"):
            raise ValueError(f"unknown ordering kind {self.kind!r}")

    def resolve(self, target_x: np.ndarray, rng: RngStream | None) -> np.ndarray:
        n = np.asarray(target_x).size
        if self.kind == "given":
            return np.arange(n)
        if self.kind == "left-to-right":
            return np.argsort(target_x, kind="stable")
        if self.seed is not None:
            return RngStream(self.seed).permutation(n)
        if rng is None:
            raise ValueError("a random ordering needs an RngStream")
        return rng.permutation(n)


def _resolve_ordering(ordering, target_x, rng) -> np.ndarray:
    if isinstance(ordering, str):
        ordering = Ordering(ordering)
    if isinstance(ordering, Ordering):
        return ordering.resolve(target_x, rng)
    perm = np.asarray(ordering, int)
    n = np.asarray(target_x).size
    if sorted(perm.tolist()) != list(range(n)):
        raise ValueError("explicit ordering must be a permutation of the target indices")
    return perm


@dataclass(frozen=True)
class Trajectory:
    """An ordered rollout: inputs and sampled outputs in visit order."""

    xs: np.ndarray
    ys: np.ndarray
    permutation: np.ndarray
    channels: np.ndarray

    def __len__(self) -> int:
        return self.xs.shape[0]

    def values_in_target_order(self) -> np.ndarray:
        out = np.empty_like(self.ys)
        out[self.permutation] = self.ys
        return out


def _check_context_budget(adapter: ModelAdapter, max_conditioning: int) -> None:
    limit = adapter.train_context_max
    if limit is not None and max_conditioning > limit:
        warnings.warn(
            f"rollout conditions on up to {max_conditioning} points but the adapter "
            f"declares a training context maximum of {limit}; predictions may degrade",
            ContextSizeWarning, stacklevel=3)


def ar_sample(adapter: ModelAdapter, context_x, context_y, target_x, rng: RngStream,
              ordering="random", block_size: int = 1,
              context_channel=None, target_channel=None) -> Trajectory:
    """Autoregressive rollout over the target inputs.

    Target points are visited in the resolved ordering, ``block_size`` at a
    time: each block is drawn independently from the model's marginals
    given the context plus everything sampled so far, then appended to the
    conditioning set.  ``block_size=1`` is the fully sequential procedure;
    ``block_size >= len(target_x)`` collapses to one factorized draw from a
    single forward pass.  Empty targets produce an empty trajectory.
    """
    if block_size < 1:
        raise ValueError("block_size must be at least 1")
    target_x = np.asarray(target_x, float)
    tc = np.zeros(target_x.shape, int) if target_channel is None else np.asarray(target_channel, int)
    if target_x.size == 0:
        return Trajectory(np.empty(0), np.empty(0), np.empty(0, int), np.empty(0, int))
    perm = _resolve_ordering(ordering, target_x, rng)
    cur_x = np.asarray(context_x, float).copy()
    cur_y = np.asarray(context_y, float).copy()
    cur_c = (np.zeros(cur_x.shape, int) if context_channel is None
             else np.asarray(context_channel, int).copy())
    _check_context_budget(adapter, cur_x.size + target_x.size - min(block_size, target_x.size))
    xs_out, ys_out, ch_out = [], [], []
    for start in range(0, perm.size, block_size):
        block = perm[start:start + block_size]
        pred = adapter.predict(cur_x, cur_y, target_x[block], cur_c, tc[block])
        z = pred.means + np.sqrt(pred.variances) * rng.standard_normal(block.size)
        y_raw = adapter.to_data_space(z)
        xs_out.append(target_x[block])
        ys_out.append(y_raw)
        ch_out.append(tc[block])
        cur_x = np.concatenate([cur_x, target_x[block]])
        cur_y = np.concatenate([cur_y, y_raw])
        cur_c = np.concatenate([cur_c, tc[block]])
    return Trajectory(np.concatenate(xs_out), np.concatenate(ys_out), perm,
                      np.concatenate(ch_out))


def ar_logpdf(adapter: ModelAdapter, context_x, context_y, target_x, values,
              ordering="given", rng: RngStream | None = None,
              context_channel=None, target_channel=None) -> float:
    """Chain-rule joint log-density of ``values`` under sequential conditioning.

    The i-th step scores value_i under the model's marginal at target_i
    given the context plus the earlier (input, value) pairs, following the
    resolved ordering.  Deterministic given the ordering; empty targets
    give 0.
    """
    target_x = np.asarray(target_x, float)
    values = np.asarray(values, float)
    if values.shape != target_x.shape:
        raise ValueError("values must match target_x in length")
    if target_x.size == 0:
        return 0.0
    tc = np.zeros(target_x.shape, int) if target_channel is None else np.asarray(target_channel, int)
    perm = _resolve_ordering(ordering, target_x, rng)
    cur_x = np.asarray(context_x, float).copy()
    cur_y = np.asarray(context_y, float).copy()
    cur_c = (np.zeros(cur_x.shape, int) if context_channel is None
             else np.asarray(context_channel, int).copy())
    _check_context_budget(adapter, cur_x.size + target_x.size - 1)
    z = adapter.to_model_space(values)
    jac = adapter.log_jacobian(values)
    total = 0.0
    for i in perm:
        pred = adapter.predict(cur_x, cur_y, target_x[i:i + 1], cur_c, tc[i:i + 1])
        mu, var = pred.means[0], pred.variances[0]
        total += -0.5 * (LOG_2PI + np.log(var) + (z[i] - mu) ** 2 / var) + jac[i]
        cur_x = np.concatenate([cur_x, target_x[i:i + 1]])
        cur_y = np.concatenate([cur_y, values[i:i + 1]])
        cur_c = np.concatenate([cur_c, tc[i:i + 1]])
    return float(total)


def ar_logpdf_task(adapter: ModelAdapter, task: Task, ordering="given",
                   rng: RngStream | None = None) -> float:
    if task.target_y is None:
        raise ValueError("task carries no target outputs")
    return ar_logpdf(adapter, task.context_x, task.context_y, task.target_x,
                     task.target_y, ordering, rng, task.context_channel,
                     task.target_channel)


def ar_loglik_spread(adapter: ModelAdapter, task: Task, n_orderings: int,
                     rng: RngStream) -> tuple[float, float]:
    """Mean and standard deviation of the chain-rule log-density over random orderings.

    A single ordering reports a standard deviation of zero.
    """
    if n_orderings < 1:
        raise ValueError("n_orderings must be at least 1")
    values = np.array([
        ar_logpdf_task(adapter, task, ordering=rng.permutation(task.n_targets))
        for _ in range(n_orderings)
    ])
    return float(values.mean()), float(values.std())


def denoise(adapter: ModelAdapter, context_x, context_y, grid_x, grid_y, query_x,
            context_channel=None, grid_channel=None, query_channel=None) -> np.ndarray:
    """One forward pass over context plus a noisy sample; predictive means only.

    This is the second step of the smooth-sampling procedure: conditioning
    on enough noisy observations pins the underlying function down, so the
    predictive mean approximates the noiseless sample.  No uncertainty is
    attached to the result.
    """
    cx = np.concatenate([np.asarray(context_x, float), np.asarray(grid_x, float)])
    cy = np.concatenate([np.asarray(context_y, float), np.asarray(grid_y, float)])
    cc = None
    if context_channel is not None or grid_channel is not None:
        base = (np.zeros(np.asarray(context_x).size, int) if context_channel is None
                else np.asarray(context_channel, int))
        gch = (np.zeros(np.asarray(grid_x).size, int) if grid_channel is None
               else np.asarray(grid_channel, int))
        cc = np.concatenate([base, gch])
    pred = adapter.predict(cx, cy, np.asarray(query_x, float), cc, query_channel)
    return adapter.to_data_space(pred.means)


def smooth_sample(adapter: ModelAdapter, context_x, context_y, grid_x, query_x,
                  rng: RngStream, ordering="random",
                  context_channel=None) -> tuple[Trajectory, np.ndarray]:
    """Two-step smooth sampling: AR rollout on a grid, then one denoising pass.

    Step 1 draws a noisy trajectory over ``grid_x``; step 2 conditions the
    model on context plus that trajectory and returns the predictive means
    at ``query_x`` as the noiseless sample.  The grid size should stay
    within the adapter's training context regime (see the context-size
    warning on rollouts).
    """
    traj = ar_sample(adapter, context_x, context_y, grid_x, rng, ordering,
                     context_channel=context_channel)
    denoised = denoise(adapter, context_x, context_y, traj.xs, traj.ys, query_x,
                       context_channel=context_channel, grid_channel=traj.channels)
    return traj, denoised


@dataclass(frozen=True)
class AuxArPrediction:
    """Equal-weight mixture of per-trajectory Gaussian marginals.

    ``means`` and ``variances`` have shape (n_trajectories, n_targets) and
    live in the adapter's transformed output space; ``logpdf`` scores raw
    values, marginally per target point.
    """

    means: np.ndarray
    variances: np.ndarray
    transform: str = "identity"

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def logpdf(self, values: np.ndarray) -> np.ndarray:
        """Per-target-point marginal log-density of raw output values."""
        values = np.atleast_1d(np.asarray(values, float))
        if self.transform == "identity":
            z, jac = values, np.zeros_like(values)
        elif self.transform == "log1p":
            z, jac = np.log1p(values), -np.log1p(values)
        else:
            raise ValueError(f"unknown transform {self.transform!r}")
        comp = -0.5 * (LOG_2PI + np.log(self.variances) + (z - self.means) ** 2 / self.variances)
        return logsumexp(comp, axis=0) - np.log(self.n_components) + jac


def aux_ar_predict(adapter: ModelAdapter, context_x, context_y, target_x,
                   aux_sampler: Callable[[int, RngStream], np.ndarray], n_aux: int,
                   n_trajectories: int, rng: RngStream,
                   context_channel=None, target_channel=None) -> AuxArPrediction:
    """Enrich target marginals by averaging over auxiliary AR rollouts.

    Draws ``n_trajectories`` rollouts of length ``n_aux`` at inputs sampled
    from ``aux_sampler``, conditions the model on each, and returns the
    equal-weight mixture of the resulting marginals at ``target_x``.  With
    ``n_aux == 0`` the plain marginal is returned regardless of the number
    of trajectories.
    """
    if n_aux < 0:
        raise ValueError("n_aux must be nonnegative")
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be at least 1")
    target_x = np.asarray(target_x, float)
    if n_aux == 0:
        pred = adapter.predict(context_x, context_y, target_x, context_channel,
                               target_channel)
        return AuxArPrediction(pred.means[None, :], pred.variances[None, :],
                               adapter.transform)
    means, variances = [], []
    for j in range(n_trajectories):
        traj_rng = rng.fork(j)
        aux_x = np.asarray(aux_sampler(n_aux, traj_rng), float)
        traj = ar_sample(adapter, context_x, context_y, aux_x, traj_rng,
                         ordering="given", context_channel=context_channel)
        cx = np.concatenate([np.asarray(context_x, float), traj.xs])
        cy = np.concatenate([np.asarray(context_y, float), traj.ys])
        cc = None
        if context_channel is not None:
            cc = np.concatenate([np.asarray(context_channel, int), traj.channels])
        pred = adapter.predict(cx, cy, target_x, cc, target_channel)
        means.append(pred.means)
        variances.append(pred.variances)
    return AuxArPrediction(np.stack(means), np.stack(variances), adapter.transform)
