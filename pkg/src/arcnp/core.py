"""Shared domain types, the random-number contract, and Gaussian utility math.

Everything downstream speaks in terms of :class:`Task` (a context set plus
target inputs, optionally with target outputs), :class:`MarginalPrediction`
(independent Gaussians, one per target input) and :class:`GaussianJoint`
(a full multivariate normal).  All randomness flows through explicitly
passed :class:`RngStream` objects; there is no global generator anywhere in
the package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "FactorizationError",
    "NonFiniteDensityError",
    "Point",
    "Task",
    "MarginalPrediction",
    "GaussianJoint",
    "RngStream",
    "cholesky_with_jitter",
    "gaussian_logpdf",
    "gaussian_kl",
    "mc_kl",
]

LOG_2PI = float(np.log(2.0 * np.pi))

# Relative jitter levels tried when factorizing a covariance.  An exact
# (jitter-free) attempt comes first so that genuinely well-conditioned
# matrices, e.g. noiseless interpolation at well-separated points, are not
# perturbed at all.
JITTER_LEVELS = (0.0, 1e-8, 1e-6)


class FactorizationError(RuntimeError):
    """A covariance matrix could not be Cholesky-factorized, even with jitter.

    ``dim`` carries the size of the failing matrix.
    """

    def __init__(self, dim: int, message: str | None = None):
        self.dim = int(dim)
        super().__init__(message or f"covariance of dimension {dim} is not positive definite after jitter")


class NonFiniteDensityError(RuntimeError):
    """A density callback produced a non-finite value; ``index`` is the draw."""

    def __init__(self, index: int, message: str | None = None):
        self.index = int(index)
        super().__init__(message or f"non-finite density at draw index {index}")


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


class Point(NamedTuple):
    """A single input/output observation; ``channel`` tags multi-series data."""

    x: float
    y: float
    channel: int = 0


@dataclass(frozen=True)
class Task:
    """A context set plus target inputs; the universal unit of data.

    ``target_y`` is present for training and evaluation tasks and ``None``
    for pure sampling.  Channels default to zero and only matter for
    multi-series data such as predator-prey populations.
    """

    context_x: np.ndarray
    context_y: np.ndarray
    target_x: np.ndarray
    target_y: np.ndarray | None = None
    context_channel: np.ndarray = field(default=None)  # type: ignore[assignment]
    target_channel: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        cx = _readonly(np.atleast_1d(self.context_x))
        cy = _readonly(np.atleast_1d(self.context_y))
        tx = _readonly(np.atleast_1d(self.target_x))
        if cx.shape != cy.shape or cx.ndim != 1:
            raise ValueError("context_x and context_y must be equal-length 1-d arrays")
        if tx.ndim != 1:
            raise ValueError("target_x must be a 1-d array")
        if not (np.all(np.isfinite(cx)) and np.all(np.isfinite(cy)) and np.all(np.isfinite(tx))):
            raise ValueError("task contains non-finite values")
        object.__setattr__(self, "context_x", cx)
        object.__setattr__(self, "context_y", cy)
        object.__setattr__(self, "target_x", tx)
        if self.target_y is not None:
            ty = _readonly(np.atleast_1d(self.target_y))
            if ty.shape != tx.shape:
                raise ValueError("target_y must match target_x in length")
            if not np.all(np.isfinite(ty)):
                raise ValueError("target_y contains non-finite values")
            object.__setattr__(self, "target_y", ty)
        for name, ref in (("context_channel", cx), ("target_channel", tx)):
            ch = getattr(self, name)
            ch = np.zeros(ref.shape, dtype=int) if ch is None else np.array(ch, dtype=int, copy=True)
            if ch.shape != ref.shape:
                raise ValueError(f"{name} must match the corresponding inputs in length")
            ch.setflags(write=False)
            object.__setattr__(self, name, ch)

    @classmethod
    def from_points(cls, context: Sequence[Point], target_inputs: Sequence[float],
                    target_outputs: Sequence[float] | None = None,
                    target_channels: Sequence[int] | None = None) -> "Task":
        cx = [p.x for p in context]
        cy = [p.y for p in context]
        cc = [p.channel for p in context]
        return cls(
            context_x=np.asarray(cx, float),
            context_y=np.asarray(cy, float),
            target_x=np.asarray(target_inputs, float),
            target_y=None if target_outputs is None else np.asarray(target_outputs, float),
            context_channel=np.asarray(cc, int),
            target_channel=None if target_channels is None else np.asarray(target_channels, int),
        )

    @property
    def n_context(self) -> int:
        return self.context_x.shape[0]

    @property
    def n_targets(self) -> int:
        return self.target_x.shape[0]


@dataclass(frozen=True)
class MarginalPrediction:
    """Per-target-point Gaussian (mean, variance); the output of any CNP-like model."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        m = _readonly(np.atleast_1d(self.means))
        v = _readonly(np.atleast_1d(self.variances))
        if m.shape != v.shape or m.ndim != 1:
            raise ValueError("means and variances must be equal-length 1-d arrays")
        if not np.all(v > 0):
            raise ValueError("all predicted variances must be strictly positive")
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    def __len__(self) -> int:
        return self.means.shape[0]

    def logpdf(self, values: np.ndarray) -> float:
        """Factorized Gaussian log-density of ``values`` under the marginals."""
        values = np.asarray(values, float)
        z2 = (values - self.means) ** 2 / self.variances
        return float(-0.5 * np.sum(LOG_2PI + np.log(self.variances) + z2))

    def sample(self, rng: "RngStream") -> np.ndarray:
        return self.means + np.sqrt(self.variances) * rng.standard_normal(len(self))


@dataclass(frozen=True)
class GaussianJoint:
    """Mean vector plus full covariance; the output of joint-Gaussian oracles."""

    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        m = _readonly(np.atleast_1d(self.mean))
        c = _readonly(np.atleast_2d(self.covariance))
        if m.ndim != 1 or c.shape != (m.shape[0], m.shape[0]):
            raise ValueError("covariance must be square and match the mean length")
        if not np.allclose(c, c.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "covariance", c)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def diagonal(self) -> MarginalPrediction:
        return MarginalPrediction(self.mean, np.diag(self.covariance))

    def sample(self, rng: "RngStream", n: int | None = None) -> np.ndarray:
        chol, _ = cholesky_with_jitter(self.covariance)
        if n is None:
            return self.mean + chol @ rng.standard_normal(self.dim)
        return self.mean + rng.standard_normal((n, self.dim)) @ chol.T


class RngStream:
    """Seeded random stream; equal seeds give identical draw sequences.

    Wraps a PCG64 generator.  Streams are single-owner: use :meth:`fork` to
    derive an independent child stream deterministically, or :meth:`clone`
    to restart an identical copy from the seed.
    """

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._spawn_key = tuple(_spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(self.seed, spawn_key=self._spawn_key)))

    def fork(self, key: int) -> "RngStream":
        """Derive a deterministic child stream; children with distinct keys are independent."""
        return RngStream(self.seed, self._spawn_key + (int(key),))

    def clone(self) -> "RngStream":
        """A fresh stream that will replay this stream's draws from the start."""
        return RngStream(self.seed, self._spawn_key)

    def standard_normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, spawn_key={self._spawn_key})"


def cholesky_with_jitter(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``cov``, escalating diagonal jitter on failure.

    Tries no jitter first, then 1e-8 and 1e-6 times the mean diagonal
    magnitude (absolute when the diagonal is essentially zero).  Returns the
    factor and the jitter actually used; raises :class:`FactorizationError`
    once all levels fail.
    """
    cov = np.asarray(cov, float)
    n = cov.shape[0]
    scale = float(np.mean(np.abs(np.diag(cov)))) if n else 0.0
    if scale <= 0.0 or not np.isfinite(scale):
        scale = 1.0
    for level in JITTER_LEVELS:
        jitter = level * scale
        try:
            chol = np.linalg.cholesky(cov + jitter * np.eye(n) if jitter else cov)
            return chol, jitter
        except np.linalg.LinAlgError:
            continue
    raise FactorizationError(n)


def _solve_lower(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    from scipy.linalg import solve_triangular

    return solve_triangular(chol, b, lower=True)


def gaussian_logpdf(value: np.ndarray, dist: GaussianJoint) -> float:
    """Exact multivariate normal log-density via triangular factorization."""
    value = np.asarray(value, float)
    if value.shape != (dist.dim,):
        raise ValueError(f"value has shape {value.shape}, expected ({dist.dim},)")
    chol, _ = cholesky_with_jitter(dist.covariance)
    alpha = _solve_lower(chol, value - dist.mean)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return float(-0.5 * (dist.dim * LOG_2PI + logdet + alpha @ alpha))


def gaussian_logpdf_batch(values: np.ndarray, dist: GaussianJoint) -> np.ndarray:
    """Log-density of each row of ``values`` (shape ``(n, dim)``) under ``dist``."""
    values = np.atleast_2d(np.asarray(values, float))
    chol, _ = cholesky_with_jitter(dist.covariance)
    alpha = _solve_lower(chol, (values - dist.mean).T)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (dist.dim * LOG_2PI + logdet + np.sum(alpha * alpha, axis=0))


def gaussian_kl(p: GaussianJoint, q: GaussianJoint) -> float:
    """Closed-form KL divergence KL(p, q) between multivariate normals.

    Always nonnegative; tiny negative round-off is clamped to zero.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    chol_p, _ = cholesky_with_jitter(p.covariance)
    chol_q, _ = cholesky_with_jitter(q.covariance)
    # tr(Sigma_q^-1 Sigma_p) = ||Lq^-1 Lp||_F^2
    a = _solve_lower(chol_q, chol_p)
    trace = float(np.sum(a * a))
    b = _solve_lower(chol_q, q.mean - p.mean)
    maha = float(b @ b)
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol_q))) - np.sum(np.log(np.diag(chol_p))))
    kl = 0.5 * (trace + maha - p.dim + logdet)
    if kl < -1e-6:
        raise FactorizationError(p.dim, f"KL computed as {kl}; covariance factorization is unreliable")
    return max(kl, 0.0)


def mc_kl(
    log_p: Callable[[np.ndarray], np.ndarray],
    log_q: Callable[[np.ndarray], np.ndarray],
    sampler: Callable[[int, RngStream], np.ndarray],
    n_samples: int,
    rng: RngStream,
) -> tuple[float, float]:
    """Monte-Carlo estimate of KL(p, q) with its standard error.

    ``sampler(n, rng)`` must draw ``n`` samples from p as an ``(n, dim)``
    array (or ``(n,)`` for scalars); ``log_p`` and ``log_q`` evaluate
    log-densities for such a batch.  Reproducible given the stream's seed.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    draws = np.asarray(sampler(n_samples, rng), float)
    lp = np.asarray(log_p(draws), float)
    lq = np.asarray(log_q(draws), float)
    diffs = lp - lq
    bad = ~np.isfinite(diffs)
    if np.any(bad):
        raise NonFiniteDensityError(int(np.argmax(bad)))
    estimate = float(np.mean(diffs))
    se = float(np.std(diffs, ddof=1) / np.sqrt(n_samples))
    return estimate, se
