"""A small deep-set CNP trained by maximum likelihood.

The model is a pair of MLPs: an encoder maps each context (input, output)
pair to an embedding, embeddings are mean-pooled into a single set
representation, and a decoder maps (representation, target input) to a
Gaussian mean and variance.  Gradients are accumulated by a hand-rolled
reverse pass through the decoder, the pooling and the encoder; no autodiff
framework is involved.  Training uses Adam and keeps the parameter
snapshot with the best lower-confidence-bound validation objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import LOG_2PI, MarginalPrediction, RngStream, Task

__all__ = [
    "MlpConfig",
    "CnpConfig",
    "CnpModel",
    "TrainConfig",
    "TrainResult",
    "cnp_forward",
    "nll_loss",
    "Adam",
    "adam_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "arcnp-cnp-checkpoint-v1"


class NonFiniteActivationError(RuntimeError):
    def __init__(self, layer: int):
        self.layer = int(layer)
        super().__init__(f"non-finite activations at layer {layer}")


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class MlpConfig:
    """Layer widths (input through output) of a ReLU MLP with fan-in uniform init."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(w <= 0 for w in self.widths):
            raise ValueError("all widths must be positive")


class Mlp:
    """Weights plus forward/backward passes; ReLU between layers, linear output."""

    def __init__(self, config: MlpConfig, rng: RngStream):
        self.config = config
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(config.widths[:-1], config.widths[1:]):
            bound = np.sqrt(1.0 / fan_in)
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def forward(self, x: np.ndarray, cache: list | None = None) -> np.ndarray:
        """Apply the MLP to rows of ``x``; pass ``cache`` to retain activations."""
        h = x
        if cache is not None:
            cache.append(h)
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            if cache is not None:
                cache.append(h)
        return h

    def backward(self, cache: list, grad_out: np.ndarray,
                 grads_w: list[np.ndarray], grads_b: list[np.ndarray]) -> np.ndarray:
        """Accumulate parameter gradients and return the gradient on the input."""
        g = grad_out
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (cache[i + 1] > 0.0)
            grads_w[i] += cache[i].T @ g
            grads_b[i] += g.sum(axis=0)
            g = g @ self.weights[i].T
        return g

    def check_finite(self, x: np.ndarray) -> None:
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            if not np.all(np.isfinite(h)):
                raise NonFiniteActivationError(i)


@dataclass(frozen=True)
class CnpConfig:
    """Desk-scale deep-set CNP shape; channel-aware models get one extra input feature."""

    embedding_dim: int = 64
    encoder_width: int = 64
    encoder_depth: int = 3
    decoder_width: int = 64
    decoder_depth: int = 4
    variance_floor: float = 1e-6
    with_channel: bool = False
    empty_encoding: str = "zeros"  # or "learned"

    def __post_init__(self):
        if self.variance_floor <= 0:
            raise ValueError("variance_floor must be strictly positive")
        if self.empty_encoding not in ("zeros", "learned"):
            raise ValueError("empty_encoding must be 'zeros' or 'learned'")

    @property
    def n_input_features(self) -> int:
        return 3 if self.with_channel else 2

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return (self.n_input_features,
                *([self.encoder_width] * self.encoder_depth), self.embedding_dim)

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        target_feats = 2 if self.with_channel else 1
        return (self.embedding_dim + target_feats,
                *([self.decoder_width] * self.decoder_depth), 2)


class CnpModel:
    """Encoder/pool/decoder parameters plus the variance floor."""

    def __init__(self, config: CnpConfig, rng: RngStream):
        self.config = config
        self.encoder = Mlp(MlpConfig(config.encoder_widths), rng.fork(0))
        self.decoder = Mlp(MlpConfig(config.decoder_widths), rng.fork(1))
        self.empty_encoding = np.zeros(config.embedding_dim)
        if config.empty_encoding == "learned":
            bound = np.sqrt(1.0 / config.embedding_dim)
            self.empty_encoding = rng.fork(2).uniform(-bound, bound, config.embedding_dim)

    def parameters(self) -> list[np.ndarray]:
        params = self.encoder.weights + self.encoder.biases \
            + self.decoder.weights + self.decoder.biases
        if self.config.empty_encoding == "learned":
            params.append(self.empty_encoding)
        return params

    def set_parameters(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.parameters(), values, strict=True):
            p[...] = v

    def snapshot(self) -> list[np.ndarray]:
        return [p.copy() for p in self.parameters()]


def _context_features(config: CnpConfig, cx, cy, cc) -> np.ndarray:
    cols = [cx, cy] + ([cc.astype(float)] if config.with_channel else [])
    return np.column_stack(cols)


def _target_features(config: CnpConfig, tx, tc) -> np.ndarray:
    cols = [tx] + ([tc.astype(float)] if config.with_channel else [])
    return np.column_stack(cols)


def _canonical_order(cx, cy, cc) -> np.ndarray:
    # Fixed pooling order makes permutation invariance exact, not just
    # within accumulation round-off.
    return np.lexsort((cc, cy, cx))


class _ForwardCache:
    __slots__ = ("enc_cache", "dec_cache", "n_ctx", "raw", "variances", "tgt_y")

    def __init__(self):
        self.enc_cache: list = []
        self.dec_cache: list = []


def _forward(model: CnpModel, cx, cy, cc, tx, tc, cache: _ForwardCache | None):
    cfg = model.config
    cx = np.asarray(cx, float)
    cy = np.asarray(cy, float)
    tx = np.asarray(tx, float)
    cc = np.zeros(cx.shape, int) if cc is None else np.asarray(cc, int)
    tc = np.zeros(tx.shape, int) if tc is None else np.asarray(tc, int)
    n_ctx = cx.size
    if n_ctx:
        order = _canonical_order(cx, cy, cc)
        feats = _context_features(cfg, cx[order], cy[order], cc[order])
        enc_cache = cache.enc_cache if cache is not None else None
        enc_out = model.encoder.forward(feats, enc_cache)
        embedding = enc_out.mean(axis=0)
    else:
        embedding = model.empty_encoding
    dec_in = np.concatenate(
        [np.broadcast_to(embedding, (tx.size, cfg.embedding_dim)),
         _target_features(cfg, tx, tc)], axis=1)
    dec_cache = cache.dec_cache if cache is not None else None
    out = model.decoder.forward(dec_in, dec_cache)
    means = out[:, 0]
    raw = out[:, 1]
    variances = cfg.variance_floor + _softplus(raw)
    if not np.all(np.isfinite(means)) or not np.all(np.isfinite(variances)):
        model.encoder.check_finite(_context_features(cfg, cx, cy, cc)) if n_ctx else None
        model.decoder.check_finite(dec_in)
        raise NonFiniteActivationError(-1)
    if cache is not None:
        cache.n_ctx = n_ctx
        cache.raw = raw
        cache.variances = variances
    return MarginalPrediction(means, variances)


def cnp_forward(model: CnpModel, context_x, context_y, target_x,
                context_channel=None, target_channel=None) -> MarginalPrediction:
    """Predict independent Gaussians at the target inputs given the context.

    Deterministic, and exactly invariant to the order of the context points
    (the pooled sum is taken in a canonical sorted order).  An empty
    context falls back to the configured empty-set encoding.
    """
    return _forward(model, context_x, context_y, context_channel,
                    target_x, target_channel, None)


def cnp_forward_task(model: CnpModel, task: Task) -> MarginalPrediction:
    return cnp_forward(model, task.context_x, task.context_y, task.target_x,
                       task.context_channel, task.target_channel)


def _zero_grads(model: CnpModel) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in model.parameters()]


def nll_loss(model: CnpModel, tasks: Sequence[Task]) -> tuple[float, list[np.ndarray]]:
    """Mean negative log-likelihood over a batch and its parameter gradient.

    Each task contributes the mean Gaussian negative log-density over its
    own targets, so target-set size does not change a task's weight.  The
    batch is padded and pushed through the encoder and decoder in single
    passes; results are identical (up to accumulation order) to evaluating
    tasks one at a time.
    """
    cfg = model.config
    n_batch = len(tasks)
    for index, task in enumerate(tasks):
        if task.target_y is None:
            raise ValueError(f"task {index} carries no target outputs")
    n_ctx = np.array([t.n_context for t in tasks])
    n_tgt = np.array([t.n_targets for t in tasks])
    emb_dim = cfg.embedding_dim

    grads = _zero_grads(model)
    n_enc = model.encoder.n_layers
    n_dec = model.decoder.n_layers
    genc_w, genc_b = grads[:n_enc], grads[n_enc:2 * n_enc]
    gdec_w = grads[2 * n_enc:2 * n_enc + n_dec]
    gdec_b = grads[2 * n_enc + n_dec:2 * n_enc + 2 * n_dec]

    def segment_sums(rows: np.ndarray, sizes: np.ndarray) -> np.ndarray:
        csum = np.vstack([np.zeros((1, rows.shape[1])), np.cumsum(rows, axis=0)])
        ends = np.cumsum(sizes)
        return csum[ends] - csum[ends - sizes]

    # single encoder pass over the concatenated (ragged) context sets
    embeddings = np.broadcast_to(model.empty_encoding, (n_batch, emb_dim)).copy()
    enc_cache: list = []
    if n_ctx.sum():
        feats = np.vstack([
            _context_features(cfg, *(lambda o, t: (t.context_x[o], t.context_y[o],
                                                   t.context_channel[o]))(
                _canonical_order(t.context_x, t.context_y, t.context_channel), t))
            if t.n_context else np.empty((0, cfg.n_input_features))
            for t in tasks])
        enc_out = model.encoder.forward(feats, enc_cache)
        has_ctx = n_ctx > 0
        pooled = segment_sums(enc_out, n_ctx)
        embeddings[has_ctx] = pooled[has_ctx] / n_ctx[has_ctx, None]

    # single decoder pass over the concatenated target sets
    dec_in = np.empty((int(n_tgt.sum()), cfg.decoder_widths[0]))
    dec_in[:, :emb_dim] = np.repeat(embeddings, n_tgt, axis=0)
    dec_in[:, emb_dim:] = np.vstack([
        _target_features(cfg, t.target_x, t.target_channel) for t in tasks])
    values = np.concatenate([t.target_y for t in tasks])
    dec_cache: list = []
    out = model.decoder.forward(dec_in, dec_cache)
    means = out[:, 0]
    raw = out[:, 1]
    var = cfg.variance_floor + _softplus(raw)

    resid = values - means
    with np.errstate(over="ignore"):  # overflow surfaces as the abort below
        point_nll = 0.5 * (LOG_2PI + np.log(var) + resid**2 / var)
    per_task = segment_sums(point_nll[:, None], n_tgt)[:, 0] / n_tgt
    if not np.all(np.isfinite(per_task)):
        raise FloatingPointError(
            f"non-finite loss at task index {int(np.argmax(~np.isfinite(per_task)))}")
    total = float(per_task.mean())

    # d loss / d mean and d loss / d variance, then back through softplus
    weight = np.repeat(1.0 / (n_batch * n_tgt), n_tgt)
    dmu = -resid / var * weight
    dvar = (0.5 / var - 0.5 * resid**2 / var**2) * weight
    draw = dvar * _sigmoid(raw)
    grad_out = np.column_stack([dmu, draw])
    grad_dec_in = model.decoder.backward(dec_cache, grad_out, gdec_w, gdec_b)
    grad_emb = segment_sums(grad_dec_in[:, :emb_dim], n_tgt)
    if n_ctx.sum():
        grad_rows = np.repeat(grad_emb / np.maximum(n_ctx, 1)[:, None], n_ctx, axis=0)
        model.encoder.backward(enc_cache, grad_rows, genc_w, genc_b)
    if cfg.empty_encoding == "learned":
        no_ctx = n_ctx == 0
        if np.any(no_ctx):
            grads[-1] += grad_emb[no_ctx].sum(axis=0)
    return total, grads


class Adam:
    """Adam with bias correction; beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, params: Sequence[np.ndarray], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v, strict=True):
            m[...] = self.beta1 * m + (1.0 - self.beta1) * g
            v[...] = self.beta2 * v + (1.0 - self.beta2) * g * g
            p[...] = p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(state: Adam, params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              lr: float) -> Adam:
    """Single in-place Adam update; returns the state for chaining."""
    state.step(params, grads, lr)
    return state


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 16
    tasks_per_epoch: int = 1024
    epochs: int = 20
    val_tasks: int = 256
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "tasks_per_epoch", "epochs", "val_tasks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class TrainResult:
    model: CnpModel
    train_loss: list[float] = field(default_factory=list)
    val_mean: list[float] = field(default_factory=list)
    val_lcb: list[float] = field(default_factory=list)
    best_epoch: int = -1
    aborted: bool = False


def _validation_objective(model: CnpModel, tasks: Sequence[Task]) -> tuple[float, float]:
    per_task = np.array([
        cnp_forward_task(model, t).logpdf(t.target_y) / t.n_targets for t in tasks])
    mean = float(per_task.mean())
    lcb = mean - 1.96 * float(per_task.std(ddof=1)) / np.sqrt(len(tasks))
    return mean, lcb


def train(model: CnpModel, task_fn: Callable[[RngStream], Task],
          config: TrainConfig) -> TrainResult:
    """Maximum-likelihood training with per-epoch cross-validation.

    ``task_fn`` receives a forked stream and returns one task.  Validation
    tasks are generated once and held fixed; after every epoch the model is
    scored by the lower confidence bound of its mean normalized validation
    log-likelihood, and the best snapshot is restored at the end.  A
    non-finite loss aborts training with the last good snapshot retained.
    """
    rng = RngStream(config.seed)
    val_rng = rng.fork(0)
    val_tasks = [task_fn(val_rng.fork(i)) for i in range(config.val_tasks)]
    params = model.parameters()
    optimizer = Adam(params)
    result = TrainResult(model=model)
    best_lcb = -np.inf
    best_params = model.snapshot()
    n_batches = max(1, config.tasks_per_epoch // config.batch_size)
    for epoch in range(config.epochs):
        epoch_rng = rng.fork(1 + epoch)
        epoch_loss = 0.0
        for b in range(n_batches):
            batch_rng = epoch_rng.fork(b)
            batch = [task_fn(batch_rng.fork(i)) for i in range(config.batch_size)]
            try:
                loss, grads = nll_loss(model, batch)
            except FloatingPointError:
                model.set_parameters(best_params)
                result.aborted = True
                return result
            epoch_loss += loss / n_batches
            optimizer.step(params, grads, config.learning_rate)
        val_mean, val_lcb = _validation_objective(model, val_tasks)
        result.train_loss.append(epoch_loss)
        result.val_mean.append(val_mean)
        result.val_lcb.append(val_lcb)
        if val_lcb > best_lcb:
            best_lcb = val_lcb
            best_params = model.snapshot()
            result.best_epoch = epoch
    model.set_parameters(best_params)
    return result


def save_checkpoint(path, model: CnpModel, metadata: dict | None = None) -> None:
    """Write a versioned checkpoint: config, parameter tensors, metadata."""
    cfg = model.config
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": {
            "embedding_dim": cfg.embedding_dim,
            "encoder_width": cfg.encoder_width,
            "encoder_depth": cfg.encoder_depth,
            "decoder_width": cfg.decoder_width,
            "decoder_depth": cfg.decoder_depth,
            "variance_floor": cfg.variance_floor,
            "with_channel": cfg.with_channel,
            "empty_encoding": cfg.empty_encoding,
        },
        "metadata": metadata or {},
    }
    arrays = {f"param_{i:03d}": np.asarray(p, np.float64)
              for i, p in enumerate(model.parameters())}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8),
             **arrays)


def load_checkpoint(path) -> tuple[CnpModel, dict]:
    """Load a checkpoint; rejects files without the expected format tag."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unrecognized checkpoint format {meta.get('format')!r}")
        cfg = CnpConfig(**meta["config"])
        model = CnpModel(cfg, RngStream(0))
        names = sorted(k for k in data.files if k.startswith("param_"))
        model.set_parameters([data[name] for name in names])
    return model, meta["metadata"]
