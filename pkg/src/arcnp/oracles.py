"""Exact Gaussian-process machinery and closed-form prediction oracles.

Two families of ground truth live here.  The first is a GP with one of
three stationary kernels plus i.i.d. observation noise: conditioning it
exactly gives the true posterior over noisy outputs, whose diagonal is the
best possible factorized-Gaussian predictor and whose full joint is the
best possible joint-Gaussian predictor.  The second is a three-component
mixture of deterministic functions with additive Gaussian noise, for which
the posterior mixture weights, the moment-matched marginals, and the exact
joint density all have closed forms.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .core import (
    FactorizationError,
    GaussianJoint,
    MarginalPrediction,
    RngStream,
    cholesky_with_jitter,
)

__all__ = [
    "Kernel",
    "GpModel",
    "FunctionMixture",
    "kernel_eval",
    "gram",
    "gp_posterior",
    "ideal_cnp_gp",
    "ideal_gnp_gp",
    "mixture_posterior",
    "ideal_cnp_mixture",
    "ideal_gnp_mixture",
    "mixture_true_logpdf",
    "sample_mixture_values",
]

SQRT5 = float(np.sqrt(5.0))


@dataclass(frozen=True)
class Kernel:
    """A unit-variance stationary kernel on scalar inputs.

    ``kind`` is one of ``"eq"``, ``"matern52"`` or ``"weakly_periodic"``.
    The weakly periodic kind additionally uses ``decay_scale`` (how fast the
    periodic pattern drifts), ``periodic_scale`` and ``period``.

    ``matern52_literal_exponent`` reproduces a published variant of the
    Matern-5/2 formula whose exponential decays as exp(-r) instead of the
    standard exp(-sqrt(5) r).  That variant exceeds 1 away from zero lag and
    is not positive definite; it exists purely as a diagnostic and should
    not be used to build Gram matrices.
    """

    kind: str = "eq"
    length_scale: float = 0.25
    decay_scale: float = 0.5
    periodic_scale: float = 1.0
    period: float = 0.25
    matern52_literal_exponent: bool = False

    def __post_init__(self):
        if self.kind not in ("eq", "matern52", "weakly_periodic"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        for name in ("length_scale", "decay_scale", "periodic_scale", "period"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


def kernel_eval(kernel: Kernel, x: float, x2: float) -> float:
    """Evaluate ``kernel`` at a pair of scalar inputs."""
    return float(gram(kernel, np.asarray([x], float), np.asarray([x2], float))[0, 0])


def gram(kernel: Kernel, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Gram matrix ``k(xs[i], ys[j])``."""
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    diff = xs[:, None] - ys[None, :]
    if kernel.kind == "eq":
        return np.exp(-0.5 * (diff / kernel.length_scale) ** 2)
    if kernel.kind == "matern52":
        r = np.abs(diff) / kernel.length_scale
        poly = 1.0 + SQRT5 * r + (5.0 / 3.0) * r**2
        decay = np.exp(-r) if kernel.matern52_literal_exponent else np.exp(-SQRT5 * r)
        return poly * decay
    # weakly periodic: EQ decay times a periodic pattern
    decay = -0.5 * (diff / kernel.decay_scale) ** 2
    periodic = -(2.0 / kernel.periodic_scale**2) * np.sin(np.pi * diff / kernel.period) ** 2
    return np.exp(decay + periodic)


@dataclass(frozen=True)
class GpModel:
    """A zero-mean GP prior over the latent function plus i.i.d. noise on outputs."""

    kernel: Kernel = Kernel()
    noise_variance: float = 0.05

    def __post_init__(self):
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")


def gp_posterior(model: GpModel, context_x: np.ndarray, context_y: np.ndarray,
                 target_x: np.ndarray) -> GaussianJoint:
    """Exact posterior over noisy outputs at ``target_x`` given the context.

    With an empty context this is the prior.  The returned covariance is
    the posterior over the latent function plus ``noise_variance`` on the
    diagonal, i.e. the distribution of observations at the targets.
    """
    context_x = np.asarray(context_x, float)
    context_y = np.asarray(context_y, float)
    target_x = np.asarray(target_x, float)
    if target_x.size == 0:
        raise ValueError("target_x must be non-empty")
    ktt = gram(model.kernel, target_x, target_x)
    noise_t = model.noise_variance * np.eye(target_x.size)
    if context_x.size == 0:
        return GaussianJoint(np.zeros(target_x.size), ktt + noise_t)
    kcc = gram(model.kernel, context_x, context_x) + model.noise_variance * np.eye(context_x.size)
    ktc = gram(model.kernel, target_x, context_x)
    chol, _ = cholesky_with_jitter(kcc)
    from scipy.linalg import solve_triangular

    a = solve_triangular(chol, ktc.T, lower=True)  # (n_ctx, n_tgt)
    b = solve_triangular(chol, context_y, lower=True)
    mean = a.T @ b
    cov = ktt - a.T @ a + noise_t
    cov = 0.5 * (cov + cov.T)
    return GaussianJoint(mean, cov)


def ideal_cnp_gp(model: GpModel, context_x: np.ndarray, context_y: np.ndarray,
                 target_x: np.ndarray) -> MarginalPrediction:
    """Marginals of the exact posterior: the best factorized-Gaussian predictor."""
    joint = gp_posterior(model, context_x, context_y, target_x)
    variances = np.maximum(np.diag(joint.covariance), 1e-12)
    return MarginalPrediction(joint.mean, variances)


def ideal_gnp_gp(model: GpModel, context_x: np.ndarray, context_y: np.ndarray,
                 target_x: np.ndarray) -> GaussianJoint:
    """The best joint-Gaussian predictor; for GP truth that is the posterior itself."""
    return gp_posterior(model, context_x, context_y, target_x)


def _default_components() -> tuple[Callable[[np.ndarray], np.ndarray], ...]:
    return (lambda x: x**2 + 1.0, lambda x: x, lambda x: -x)


@dataclass(frozen=True)
class FunctionMixture:
    """A mixture of three deterministic mean functions with additive Gaussian noise.

    The default component means are x^2 + 1, x and -x with prior weights
    (0.25, 0.5, 0.25).  Component noise variances are configurable: the
    moment formulas support both the unit-variance setup and the
    heteroscedastic (0.25, 0.0625, 0.25) setup.
    """

    weights: tuple[float, ...] = (0.25, 0.5, 0.25)
    noise_variances: tuple[float, ...] = (1.0, 1.0, 1.0)
    components: tuple[Callable[[np.ndarray], np.ndarray], ...] = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.components is None:
            object.__setattr__(self, "components", _default_components())
        w = tuple(float(v) for v in self.weights)
        if len(w) != len(self.components) or len(w) != len(self.noise_variances):
            raise ValueError("weights, noise_variances and components must have equal length")
        if any(v < 0 for v in w) or abs(sum(w) - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if any(v <= 0 for v in self.noise_variances):
            raise ValueError("noise variances must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "noise_variances", tuple(float(v) for v in self.noise_variances))

    def component_means(self, x: np.ndarray) -> np.ndarray:
        """Stack of f_i(x), shape ``(n_components, len(x))``."""
        x = np.atleast_1d(np.asarray(x, float))
        return np.stack([f(x) for f in self.components])


def heteroscedastic_mixture() -> FunctionMixture:
    """The variant with per-component noise variances (0.25, 0.0625, 0.25)."""
    return FunctionMixture(noise_variances=(0.25, 0.0625, 0.25))


def _log_posterior_weights(mix: FunctionMixture, context_x: np.ndarray,
                           context_y: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):  # zero prior weights are legal
        logw = np.log(np.asarray(mix.weights))
    if context_x.size == 0:
        return logw - logsumexp(logw)
    means = mix.component_means(context_x)  # (k, n)
    var = np.asarray(mix.noise_variances)[:, None]
    loglik = -0.5 * np.sum(np.log(2.0 * np.pi * var) + (context_y - means) ** 2 / var, axis=1)
    logw = logw + loglik
    return logw - logsumexp(logw)


def mixture_posterior(mix: FunctionMixture, context_x: np.ndarray,
                      context_y: np.ndarray) -> FunctionMixture:
    """Bayes update of the mixture weights given context observations.

    Each component's likelihood is the product over context points of the
    Gaussian density at that component's mean function; weights are
    renormalized in log space so long contexts cannot underflow.
    """
    context_x = np.asarray(context_x, float)
    context_y = np.asarray(context_y, float)
    w = np.exp(_log_posterior_weights(mix, context_x, context_y))
    w = w / w.sum()
    return replace(mix, weights=tuple(w))


def ideal_cnp_mixture(mix: FunctionMixture, context_x: np.ndarray, context_y: np.ndarray,
                      target_x: np.ndarray) -> MarginalPrediction:
    """Moment-matched per-point Gaussians under the posterior mixture weights.

    The mean is the weight-averaged component mean and the variance is the
    weight-averaged second moment (component noise variance plus squared
    mean) minus the squared mean.
    """
    w = np.exp(_log_posterior_weights(mix, np.asarray(context_x, float),
                                      np.asarray(context_y, float)))
    means = mix.component_means(np.asarray(target_x, float))
    var = np.asarray(mix.noise_variances)
    mu = w @ means
    second = w @ (means**2 + var[:, None])
    return MarginalPrediction(mu, np.maximum(second - mu**2, 1e-300))


def ideal_gnp_mixture(mix: FunctionMixture, context_x: np.ndarray, context_y: np.ndarray,
                      target_x: np.ndarray) -> GaussianJoint:
    """Moment-matched joint Gaussian under the posterior mixture weights.

    Cov(y_j, y_k) = sum_i w_i (f_i(x_j) f_i(x_k) + delta_jk s_i^2)
    - mu(x_j) mu(x_k), with s_i^2 the component noise variances.
    """
    target_x = np.asarray(target_x, float)
    w = np.exp(_log_posterior_weights(mix, np.asarray(context_x, float),
                                      np.asarray(context_y, float)))
    means = mix.component_means(target_x)  # (k, t)
    var = np.asarray(mix.noise_variances)
    mu = w @ means
    cov = np.einsum("i,ij,ik->jk", w, means, means) - np.outer(mu, mu)
    cov += np.diag(np.full(target_x.size, w @ var))
    cov = 0.5 * (cov + cov.T)
    return GaussianJoint(mu, cov)


def mixture_true_logpdf(mix: FunctionMixture, context_x: np.ndarray, context_y: np.ndarray,
                        target_x: np.ndarray, values: np.ndarray) -> float:
    """Exact joint log-density of ``values`` at ``target_x`` given the context.

    Conditional on the component, outputs are independent Gaussians around
    the component mean function, so the joint is a weight-averaged product
    of Gaussians, evaluated in log space.
    """
    return float(mixture_true_logpdf_batch(mix, context_x, context_y, target_x,
                                           np.atleast_2d(values))[0])


def mixture_true_logpdf_batch(mix: FunctionMixture, context_x: np.ndarray, context_y: np.ndarray,
                              target_x: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Exact joint log-density of each row of ``values``; shape ``(n, len(target_x))``."""
    target_x = np.asarray(target_x, float)
    values = np.atleast_2d(np.asarray(values, float))
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    logw = _log_posterior_weights(mix, np.asarray(context_x, float), np.asarray(context_y, float))
    means = mix.component_means(target_x)  # (k, t)
    var = np.asarray(mix.noise_variances)[:, None]
    # (n, k, t) residuals -> per-component joint log-densities (n, k)
    resid = values[:, None, :] - means[None, :, :]
    comp = -0.5 * np.sum(np.log(2.0 * np.pi * var) + resid**2 / var, axis=2)
    return logsumexp(comp + logw[None, :], axis=1)


def sample_mixture_values(mix: FunctionMixture, context_x: np.ndarray, context_y: np.ndarray,
                          target_x: np.ndarray, n: int, rng: RngStream) -> np.ndarray:
    """Draw ``n`` joint output vectors at ``target_x`` from the posterior mixture."""
    target_x = np.asarray(target_x, float)
    logw = _log_posterior_weights(mix, np.asarray(context_x, float), np.asarray(context_y, float))
    comps = rng.choice(len(mix.weights), size=n, p=np.exp(logw))
    means = mix.component_means(target_x)  # (k, t)
    std = np.sqrt(np.asarray(mix.noise_variances))
    eps = rng.standard_normal((n, target_x.size))
    return means[comps] + std[comps, None] * eps
