"""Named experiments binding generators, models, AR deployment and metrics.

Each experiment is a pure function of a flat configuration mapping and a
seed: it returns metric reports plus sample records, and the CLI layer
owns all file output.  Task loops go through :func:`ordered_map` so a
worker pool can parallelize them without changing the reduction order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .ar import (
    CnpAdapter,
    IdealCnpGpAdapter,
    IdealCnpMixtureAdapter,
    ar_logpdf,
    ar_logpdf_task,
    ar_loglik_spread,
    ar_sample,
    aux_ar_predict,
    denoise,
)
from .core import GaussianJoint, RngStream, Task, gaussian_logpdf_batch
from .evaluation import MetricReport, eval_kl_to_truth, eval_loglik, joint_loglik_fn, trivial_baseline
from .generators import (
    LotkaVolterraParams,
    TaskSpec,
    sample_gp_task,
    sample_predprey_task,
    sample_sawtooth_task,
    simulate_lotka_volterra,
)
from .neural import CnpConfig, CnpModel, TrainConfig, cnp_forward_task, train
from .oracles import (
    FunctionMixture,
    GpModel,
    Kernel,
    gp_posterior,
    gram,
    heteroscedastic_mixture,
    ideal_gnp_mixture,
    sample_mixture_values,
)

__all__ = ["ExperimentOutput", "EXPERIMENTS", "ordered_map", "run_named_experiment"]


@dataclass
class ExperimentOutput:
    reports: list[MetricReport] = field(default_factory=list)
    samples: list[dict] = field(default_factory=list)


def ordered_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Map preserving input order; a thread pool is used when threads > 1."""
    if threads <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _round_list(values) -> list:
    return [float(f"{float(v):.9g}") for v in np.asarray(values, float)]


def _gp_model(config) -> GpModel:
    kernel = Kernel(kind=config.get("kernel", "eq"),
                    length_scale=float(config.get("length_scale", 0.25)))
    return GpModel(kernel=kernel, noise_variance=float(config.get("noise", 0.05)))


# --------------------------------------------------------------------------
# eq-kl: normalized KL to the exact GP posterior for oracle predictors

def run_eq_kl(config: dict, rng: RngStream, threads: int = 1) -> ExperimentOutput:
    model = _gp_model(config)
    spec = TaskSpec(context_size=(0, int(config.get("context_max", 30))),
                    target_size=int(config.get("target_size", 50)))
    n_tasks = int(config.get("n_tasks", 1024))
    task_rng = rng.fork(0)
    tasks = [sample_gp_task(model, spec, task_rng.fork(i)) for i in range(n_tasks)]

    def exact(task):
        return gp_posterior(model, task.context_x, task.context_y, task.target_x)

    def diagonal(task):
        joint = exact(task)
        return GaussianJoint(joint.mean, np.diag(np.diag(joint.covariance)))

    out = ExperimentOutput()
    out.reports.append(eval_kl_to_truth(model, exact, tasks,
                                        experiment="eq-kl", model="exact-posterior"))
    out.reports.append(eval_kl_to_truth(model, diagonal, tasks,
                                        experiment="eq-kl", model="diagonal-gp"))

    # AR rollout of the posterior marginals, scored by Monte Carlo on a
    # subset: the integrand vanishes pointwise, so few samples suffice.
    adapter = IdealCnpGpAdapter(model)
    ar_tasks = tasks[: int(config.get("ar_tasks", 64))]
    order_rng = rng.fork(1)

    def ar_density(task):
        perm = order_rng.permutation(task.n_targets)
        return lambda values: np.array([
            ar_logpdf(adapter, task.context_x, task.context_y, task.target_x,
                      row, ordering=perm) for row in np.atleast_2d(values)])

    out.reports.append(eval_kl_to_truth(
        model, ar_density, ar_tasks, n_mc=int(config.get("ar_mc", 4)),
        rng=rng.fork(2), experiment="eq-kl", model="ar-ideal-cnp"))

    sample_rng = rng.fork(3)
    for task in tasks[:2]:
        traj = ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                         sample_rng, ordering="random")
        out.samples.append({"kind": "ar-trajectory", "x": _round_list(traj.xs),
                            "y": _round_list(traj.ys)})
    return out


# --------------------------------------------------------------------------
# sawtooth-loglik: train the deep-set CNP and compare AR vs non-AR scoring

# Training recipe for the desk-scale sawtooth model (~25 CPU-minutes).
# Direct maximum-likelihood training on the final frequency band plateaus
# at the marginal solution (the set encoder never starts using the
# context), so the schedule ramps the frequency band up before settling on
# the target band, then anneals the learning rate.  Training contexts
# extend to 130 points so autoregressive rollouts over 100 targets never
# condition on more points than seen in training.
SAWTOOTH_DESK_SCHEDULE = ("0.5:2:50:1e-3,1:2.5:16:1e-3,1.5:3:16:1e-3,"
                          "2:3.5:16:1e-3,2.5:4:16:1e-3,3:4.5:16:1e-3,"
                          "3:5:130:1e-3,3:5:170:3e-4")

SAWTOOTH_DESK_BUDGET = {
    "schedule": SAWTOOTH_DESK_SCHEDULE,
    "width": 128,
    "tasks_per_epoch": 1024,
    "batch_size": 16,
    "val_tasks": 128,
    "train_context_max": 130,
    "target_size": 100,
    "variant": "subtractive",
    "model_seed": 1,
    "train_seed": 100,
}


def parse_schedule(text: str) -> list[tuple[float, float, int, float]]:
    """Parse "lo:hi:epochs:lr" comma-separated training stages."""
    stages = []
    for item in str(text).split(","):
        lo, hi, epochs, lr = item.split(":")
        stages.append((float(lo), float(hi), int(epochs), float(lr)))
    return stages


def sawtooth_train_task_fn(config: dict,
                           freq_range: tuple[float, float] | None = None,
                           ) -> Callable[[RngStream], Task]:
    spec = TaskSpec(context_size=(0, int(config.get("train_context_max", 130))),
                    target_size=int(config.get("target_size", 100)))
    variant = config.get("variant", "subtractive")

    def task_fn(stream: RngStream) -> Task:
        return sample_sawtooth_task(spec, stream, variant=variant,
                                    freq_range=freq_range)

    return task_fn


def sawtooth_eval_tasks(config: dict, rng: RngStream) -> list[Task]:
    spec = TaskSpec(context_size=(0, int(config.get("context_max", 30))),
                    target_size=int(config.get("target_size", 100)))
    variant = config.get("variant", "subtractive")
    return [sample_sawtooth_task(spec, rng.fork(i), variant=variant)
            for i in range(int(config.get("eval_tasks", 512)))]


def sawtooth_model_config(config: dict) -> CnpConfig:
    width = int(config.get("width", 64))
    return CnpConfig(embedding_dim=int(config.get("embedding_dim", width)),
                     encoder_width=width, decoder_width=width)


def train_sawtooth_cnp(config: dict) -> CnpModel:
    """Staged maximum-likelihood training of the sawtooth CNP.

    ``schedule`` holds comma-separated "freq_lo:freq_hi:epochs:lr" stages;
    a plain single-stage run can be requested with "3:5:EPOCHS:LR".
    """
    model = CnpModel(sawtooth_model_config(config),
                     RngStream(int(config.get("model_seed", 1))))
    schedule = parse_schedule(config.get("schedule", SAWTOOTH_DESK_SCHEDULE))
    base_seed = int(config.get("train_seed", 100))
    for stage, (lo, hi, epochs, lr) in enumerate(schedule):
        train(model, sawtooth_train_task_fn(config, freq_range=(lo, hi)),
              TrainConfig(learning_rate=lr,
                          batch_size=int(config.get("batch_size", 16)),
                          tasks_per_epoch=int(config.get("tasks_per_epoch", 1024)),
                          epochs=epochs,
                          val_tasks=int(config.get("val_tasks", 128)),
                          seed=base_seed + stage))
    return model


def evaluate_ar_vs_marginal(model: CnpModel, tasks: Sequence[Task], rng: RngStream,
                            experiment: str, train_context_max: int | None = None,
                            threads: int = 1) -> tuple[MetricReport, MetricReport]:
    adapter = CnpAdapter(model, train_context_max=train_context_max)
    orderings = [rng.permutation(task.n_targets) for task in tasks]

    def ar_value(pair):
        task, perm = pair
        return ar_logpdf_task(adapter, task, ordering=perm) / task.n_targets

    ar_values = ordered_map(ar_value, list(zip(tasks, orderings)), threads)
    non_values = [cnp_forward_task(model, t).logpdf(t.target_y) / t.n_targets
                  for t in tasks]
    ar_report = MetricReport(experiment, "cnp-ar", "norm_loglik", np.asarray(ar_values))
    non_report = MetricReport(experiment, "cnp", "norm_loglik", np.asarray(non_values))
    return ar_report, non_report


def run_sawtooth_loglik(config: dict, rng: RngStream, threads: int = 1,
                        model: CnpModel | None = None) -> ExperimentOutput:
    if model is None:
        model = train_sawtooth_cnp(config)
    tasks = sawtooth_eval_tasks(config, rng.fork(0))
    ar_report, non_report = evaluate_ar_vs_marginal(
        model, tasks, rng.fork(1), "sawtooth-loglik",
        train_context_max=int(config.get("train_context_max", 130)), threads=threads)
    out = ExperimentOutput(reports=[non_report, ar_report])
    out.reports.append(eval_loglik(joint_loglik_fn(trivial_baseline), tasks,
                                   experiment="sawtooth-loglik", model="trivial"))
    gaps = ar_report.per_task - non_report.per_task
    out.reports.append(MetricReport("sawtooth-loglik", "cnp-ar-minus-cnp",
                                    "norm_loglik_gain", gaps))
    adapter = CnpAdapter(model, train_context_max=int(config.get("train_context_max", 130)))
    sample_rng = rng.fork(2)
    for task in tasks[:2]:
        traj = ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                         sample_rng, ordering="random")
        out.samples.append({"kind": "ar-trajectory", "x": _round_list(traj.xs),
                            "y": _round_list(traj.ys)})
    return out


# --------------------------------------------------------------------------
# mixture-prop1: factorized-AR vs joint-Gaussian KL gap on the mixture

def prop1_context_cases(config: dict, rng: RngStream) -> list[tuple[np.ndarray, np.ndarray]]:
    mix = FunctionMixture()
    cases = []
    for i in range(int(config.get("contexts", 10))):
        case_rng = rng.fork(i)
        n_ctx = int(case_rng.integers(0, int(config.get("context_max", 5)) + 1))
        cx = case_rng.uniform(-2.0, 6.0, n_ctx)
        cy = (sample_mixture_values(mix, np.empty(0), np.empty(0), cx, 1, case_rng)[0]
              if n_ctx else np.empty(0))
        cases.append((cx, cy))
    return cases


def prop1_case_estimates(mix: FunctionMixture, cx: np.ndarray, cy: np.ndarray,
                         targets: np.ndarray, n_samples: int,
                         rng: RngStream) -> dict:
    """Shared-sample MC estimates of both KLs and their paired difference."""
    from .oracles import mixture_true_logpdf_batch

    adapter = IdealCnpMixtureAdapter(mix)
    perm = rng.permutation(targets.size)
    draws = sample_mixture_values(mix, cx, cy, targets, n_samples, rng)
    log_truth = mixture_true_logpdf_batch(mix, cx, cy, targets, draws)
    log_ar = np.array([ar_logpdf(adapter, cx, cy, targets, row, ordering=perm)
                       for row in draws])
    log_gnp = gaussian_logpdf_batch(draws, ideal_gnp_mixture(mix, cx, cy, targets))
    kl_ar = log_truth - log_ar
    kl_gnp = log_truth - log_gnp
    diff = log_gnp - log_ar  # = kl_ar - kl_gnp, sample by sample
    root_n = np.sqrt(n_samples)
    return {
        "kl_ar": float(kl_ar.mean()),
        "kl_ar_se": float(kl_ar.std(ddof=1) / root_n),
        "kl_gnp": float(kl_gnp.mean()),
        "kl_gnp_se": float(kl_gnp.std(ddof=1) / root_n),
        "diff": float(diff.mean()),
        "diff_se": float(diff.std(ddof=1) / root_n),
        "n_context": int(cx.size),
    }


def run_mixture_prop1(config: dict, rng: RngStream, threads: int = 1) -> ExperimentOutput:
    mix = FunctionMixture()
    targets = np.asarray([float(v) for v in
                          str(config.get("targets", "1,2,4,6")).split(",")])
    n_samples = int(config.get("mc_samples", 10_000))
    cases = prop1_context_cases(config, rng.fork(0))
    est_rng = rng.fork(1)

    def one_case(indexed):
        i, (cx, cy) = indexed
        return prop1_case_estimates(mix, cx, cy, targets, n_samples, est_rng.fork(i))

    results = ordered_map(one_case, list(enumerate(cases)), threads)
    out = ExperimentOutput()
    for name in ("kl_ar", "kl_gnp", "diff"):
        out.reports.append(MetricReport(
            "mixture-prop1", {"kl_ar": "ar-ideal-cnp", "kl_gnp": "ideal-gnp",
                              "diff": "ar-minus-gnp"}[name],
            "mc_kl" if name != "diff" else "mc_kl_diff",
            np.array([r[name] for r in results])))
    # Per-case records carry the paired standard errors needed for the
    # 3-sigma acceptance margin.
    for r in results:
        out.samples.append({"kind": "prop1-case", **{k: (float(f"{v:.9g}")
                            if isinstance(v, float) else v) for k, v in r.items()}})
    return out


# --------------------------------------------------------------------------
# smooth-samples: two-step recovery error versus grid density

def smooth_sample_mse(noise: float, grid_size: int, n_seeds: int, rng: RngStream,
                      length_scale: float = 0.25, n_query: int = 0) -> np.ndarray:
    """Recovery MSE per seed: latent draw and noisy grid from the exact
    generative model, denoised by the posterior-marginal adapter.

    The rollout trajectory of the exact-marginal adapter has the same law
    as (latent + noise), so drawing the pair directly keeps the latent
    available for the comparison.
    """
    model = GpModel(kernel=Kernel(kind="eq", length_scale=length_scale),
                    noise_variance=noise)
    adapter = IdealCnpGpAdapter(model)
    errors = np.empty(n_seeds)
    for s in range(n_seeds):
        seed_rng = rng.fork(s)
        gx = np.sort(seed_rng.uniform(-2.0, 2.0, grid_size))
        qx = (seed_rng.uniform(-2.0, 2.0, n_query) if n_query else gx)
        allx = np.concatenate([gx, qx])
        cov = gram(model.kernel, allx, allx)
        latent = GaussianJoint(np.zeros(allx.size),
                               cov + 1e-10 * np.eye(allx.size)).sample(seed_rng)
        ys = latent[:grid_size] + np.sqrt(noise) * seed_rng.standard_normal(grid_size)
        recovered = denoise(adapter, np.empty(0), np.empty(0), gx, ys, qx)
        errors[s] = float(np.mean((recovered - latent[grid_size:]) ** 2))
    return errors


def run_smooth_samples(config: dict, rng: RngStream, threads: int = 1) -> ExperimentOutput:
    noise = float(config.get("noise", 0.05))
    sizes = [int(v) for v in str(config.get("grid_sizes", "8,16,32,64")).split(",")]
    n_seeds = int(config.get("seeds", 200))
    out = ExperimentOutput()
    for i, size in enumerate(sizes):
        errors = smooth_sample_mse(noise, size, n_seeds, rng.fork(i))
        out.reports.append(MetricReport("smooth-samples", f"grid-{size}",
                                        "recovery_mse", errors))
    from .ar import smooth_sample

    adapter = IdealCnpGpAdapter(GpModel(noise_variance=noise))
    demo_rng = rng.fork(99)
    grid = np.linspace(-2, 2, sizes[-1])
    query = np.linspace(-2, 2, 101)
    traj, denoised = smooth_sample(adapter, np.empty(0), np.empty(0), grid, query,
                                   demo_rng)
    out.samples.append({"kind": "smooth-sample", "grid_x": _round_list(traj.xs),
                        "noisy_y": _round_list(traj.ys),
                        "query_x": _round_list(query),
                        "denoised_y": _round_list(denoised)})
    return out


# --------------------------------------------------------------------------
# predprey: train a channel-aware CNP on simulated population dynamics

def predprey_task_fn(config: dict) -> Callable[[RngStream], Task]:
    step = float(config.get("step", 0.01))
    splits = ("interpolation", "forecasting", "reconstruction")

    def task_fn(stream: RngStream) -> Task:
        params = LotkaVolterraParams.sample(stream)
        traj = simulate_lotka_volterra(params, stream, step=step)
        split = splits[int(stream.integers(0, 3))]
        return sample_predprey_task(traj, TaskSpec(split=split), stream)

    return task_fn


def run_predprey(config: dict, rng: RngStream, threads: int = 1,
                 model: CnpModel | None = None) -> ExperimentOutput:
    task_fn = predprey_task_fn(config)
    if model is None:
        model = CnpModel(CnpConfig(with_channel=True),
                         RngStream(int(config.get("model_seed", 1))))
        train(model, task_fn,
              TrainConfig(learning_rate=float(config.get("lr", 1e-4)),
                          batch_size=int(config.get("batch_size", 16)),
                          tasks_per_epoch=int(config.get("tasks_per_epoch", 256)),
                          epochs=int(config.get("epochs", 4)),
                          val_tasks=int(config.get("val_tasks", 64)),
                          seed=int(config.get("train_seed", 101))))
    adapter = CnpAdapter(model, transform="log1p", train_context_max=500)
    eval_rng = rng.fork(0)
    tasks = [task_fn(eval_rng.fork(i))
             for i in range(int(config.get("eval_tasks", 128)))]

    def marginal_density(task):
        pred = adapter.predict(task.context_x, task.context_y, task.target_x,
                               task.context_channel, task.target_channel)
        z = np.log1p(task.target_y)
        return float(pred.logpdf(z) + adapter.log_jacobian(task.target_y).sum())

    out = ExperimentOutput()
    out.reports.append(eval_loglik(marginal_density, tasks,
                                   experiment="predprey", model="cnp"))
    out.reports.append(eval_loglik(joint_loglik_fn(trivial_baseline), tasks,
                                   experiment="predprey", model="trivial"))
    sample_rng = rng.fork(1)
    task = tasks[0]
    traj = ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                     sample_rng, ordering="random",
                     context_channel=task.context_channel,
                     target_channel=task.target_channel)
    out.samples.append({"kind": "ar-trajectory", "x": _round_list(traj.xs),
                        "y": _round_list(traj.ys),
                        "channel": [int(c) for c in traj.channels]})
    return out


# --------------------------------------------------------------------------
# auxar: auxiliary-rollout marginal enrichment on the function mixture

def auxar_case(mix: FunctionMixture, adapter: IdealCnpMixtureAdapter, config: dict,
               stream: RngStream) -> tuple[float, float]:
    n_ctx = int(stream.integers(0, int(config.get("context_max", 2)) + 1))
    cx = stream.uniform(-2.0, 2.0, n_ctx)
    cy = (sample_mixture_values(mix, np.empty(0), np.empty(0), cx, 1, stream)[0]
          if n_ctx else np.empty(0))
    tx = stream.uniform(-2.0, 2.0, int(config.get("targets", 4)))
    ty = sample_mixture_values(mix, cx, cy, tx, 1, stream)[0]
    enriched = aux_ar_predict(adapter, cx, cy, tx,
                              lambda n, r: r.uniform(-2.0, 2.0, n),
                              int(config.get("aux_points", 8)),
                              int(config.get("trajectories", 64)), stream)
    plain = adapter.predict(cx, cy, tx)
    return (float(enriched.logpdf(ty).mean()),
            float(plain.logpdf(ty) / tx.size))


def run_auxar(config: dict, rng: RngStream, threads: int = 1) -> ExperimentOutput:
    mix = heteroscedastic_mixture()
    adapter = IdealCnpMixtureAdapter(mix)
    n_tasks = int(config.get("n_tasks", 1000))
    case_rng = rng.fork(0)

    def one(i):
        return auxar_case(mix, adapter, config, case_rng.fork(i))

    pairs = ordered_map(one, range(n_tasks), threads)
    enriched = np.array([p[0] for p in pairs])
    plain = np.array([p[1] for p in pairs])
    out = ExperimentOutput()
    out.reports.append(MetricReport("auxar", "aux-ar", "norm_loglik", enriched))
    out.reports.append(MetricReport("auxar", "plain", "norm_loglik", plain))
    out.reports.append(MetricReport("auxar", "aux-ar-minus-plain", "norm_loglik_gain",
                                    enriched - plain))
    return out


# --------------------------------------------------------------------------
# ordering-spread: log-likelihood spread over random AR orderings

def spread_over_tasks(adapter, tasks: Sequence[Task], n_orderings: int,
                      rng: RngStream) -> np.ndarray:
    values = []
    for i, task in enumerate(tasks):
        _, std = ar_loglik_spread(adapter, task, n_orderings, rng.fork(i))
        values.append(std / task.n_targets)
    return np.asarray(values)


def run_ordering_spread(config: dict, rng: RngStream, threads: int = 1,
                        model: CnpModel | None = None) -> ExperimentOutput:
    n_orderings = int(config.get("orderings", 10))
    n_tasks = int(config.get("n_tasks", 16))
    target_size = int(config.get("target_size", 24))
    variant = config.get("variant", "subtractive")
    if model is None:
        model = train_sawtooth_cnp(config)
    adapter = CnpAdapter(model, train_context_max=int(config.get("train_context_max", 130)))
    out = ExperimentOutput()
    task_rng = rng.fork(0)
    for label, ctx in (("empty-context", 0), ("context-20", 20)):
        spec = TaskSpec(context_size=(ctx, ctx), target_size=target_size)
        tasks = [sample_sawtooth_task(spec, task_rng.fork(hash(label) % 1000 + i),
                                      variant=variant) for i in range(n_tasks)]
        stds = spread_over_tasks(adapter, tasks, n_orderings, rng.fork(1 + ctx))
        out.reports.append(MetricReport("ordering-spread", f"cnp-{label}",
                                        "loglik_spread", stds))
    gp = GpModel()
    gp_tasks = [sample_gp_task(gp, TaskSpec(context_size=(3, 3), target_size=8),
                               task_rng.fork(5000 + i)) for i in range(n_tasks)]
    stds = spread_over_tasks(IdealCnpGpAdapter(gp), gp_tasks, n_orderings, rng.fork(99))
    out.reports.append(MetricReport("ordering-spread", "ideal-cnp-gp",
                                    "loglik_spread", stds))
    return out


EXPERIMENTS: dict[str, Callable[..., ExperimentOutput]] = {
    "eq-kl": run_eq_kl,
    "sawtooth-loglik": run_sawtooth_loglik,
    "mixture-prop1": run_mixture_prop1,
    "smooth-samples": run_smooth_samples,
    "predprey": run_predprey,
    "auxar": run_auxar,
    "ordering-spread": run_ordering_spread,
}


def run_named_experiment(name: str, config: dict, seed: int,
                         threads: int = 1, **kwargs) -> ExperimentOutput:
    if name not in EXPERIMENTS:
        raise KeyError(name)
    return EXPERIMENTS[name](config, RngStream(seed), threads=threads, **kwargs)
