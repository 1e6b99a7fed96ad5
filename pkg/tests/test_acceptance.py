"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

All tolerances are fixed here and match the statements in the README's
acceptance table.  The trained sawtooth model is shared between criteria
4 and 9 through a session fixture.
"""

import json

import numpy as np
import pytest

from arcnp.ar import (
    CnpAdapter,
    IdealCnpGpAdapter,
    ar_logpdf,
    ar_loglik_spread,
)
from arcnp.core import RngStream, gaussian_logpdf
from arcnp.evaluation import eval_kl_to_truth
from arcnp.experiments import (
    auxar_case,
    evaluate_ar_vs_marginal,
    prop1_case_estimates,
    prop1_context_cases,
    sawtooth_eval_tasks,
    smooth_sample_mse,
    spread_over_tasks,
)
from arcnp.generators import (
    LotkaVolterraParams,
    TaskSpec,
    sample_gp_task,
    sample_sawtooth_task,
    simulate_lotka_volterra,
)
from arcnp.neural import CnpConfig, CnpModel, nll_loss
from arcnp.oracles import (
    FunctionMixture,
    GpModel,
    gp_posterior,
    heteroscedastic_mixture,
)
from conftest import record


def test_criterion_1_ar_exactness_on_gaussian_truth(acceptance_log):
    model = GpModel()
    adapter = IdealCnpGpAdapter(model)
    rng = RngStream(101)
    max_gap = 0.0
    tasks = []
    for i in range(50):
        task_rng = rng.fork(i)
        n_tgt = int(task_rng.integers(1, 13))
        n_ctx = int(task_rng.integers(0, 11))
        task = sample_gp_task(model, TaskSpec(context_size=(n_ctx, n_ctx),
                                              target_size=n_tgt), task_rng)
        tasks.append(task)
        joint = gp_posterior(model, task.context_x, task.context_y, task.target_x)
        exact = gaussian_logpdf(task.target_y, joint)
        got = ar_logpdf(adapter, task.context_x, task.context_y, task.target_x,
                        task.target_y, ordering=task_rng.permutation(n_tgt))
        max_gap = max(max_gap, abs(got - exact))

    order_rng = rng.fork(999)

    def ar_density(task):
        perm = order_rng.permutation(task.n_targets)
        return lambda values: np.array([
            ar_logpdf(adapter, task.context_x, task.context_y, task.target_x,
                      row, ordering=perm) for row in np.atleast_2d(values)])

    report = eval_kl_to_truth(model, ar_density, tasks, n_mc=8, rng=rng.fork(1000))
    kl_bound = float(np.abs(report.per_task).max())
    passed = max_gap < 1e-6 and kl_bound < 1e-6
    record(acceptance_log, "1 AR exactness on Gaussian truth", passed,
           f"max |ar - joint| = {max_gap:.2e}, max |KL|/point = {kl_bound:.2e}")
    assert max_gap < 1e-6
    assert kl_bound < 1e-6


def test_criterion_2_factorized_ar_beats_joint_gaussian(acceptance_log):
    mix = FunctionMixture()  # unit component variances
    targets = np.array([1.0, 2.0, 4.0, 6.0])
    rng = RngStream(202)
    cases = prop1_context_cases({"contexts": 10, "context_max": 5}, rng.fork(0))
    est_rng = rng.fork(1)
    worst = -np.inf
    ok = True
    for i, (cx, cy) in enumerate(cases):
        est = prop1_case_estimates(mix, cx, cy, targets, 10_000, est_rng.fork(i))
        margin = est["diff"] - 3.0 * est["diff_se"]
        worst = max(worst, margin)
        ok = ok and (est["diff"] <= 3.0 * est["diff_se"])
    record(acceptance_log, "2 AR-vs-joint-Gaussian KL inequality", ok,
           f"worst diff - 3se = {worst:.4f} (<= 0 required) over 10 contexts")
    assert ok


def test_criterion_3_diagonal_baseline_kl(acceptance_log):
    from arcnp.core import GaussianJoint

    truth = GpModel()
    rng = RngStream(303)
    spec = TaskSpec(context_size=(0, 30), target_size=50)
    tasks = [sample_gp_task(truth, spec, rng.fork(i)) for i in range(2**10)]

    def diagonal(task):
        joint = gp_posterior(truth, task.context_x, task.context_y, task.target_x)
        return GaussianJoint(joint.mean, np.diag(np.diag(joint.covariance)))

    report = eval_kl_to_truth(truth, diagonal, tasks)
    passed = abs(report.mean - 0.40) < 0.05
    record(acceptance_log, "3 diagonal-baseline normalized KL", passed,
           f"mean = {report.mean:.4f} (target 0.40 +- 0.05, ci95 {report.ci95:.4f})")
    assert passed


def test_criterion_4_trained_cnp_ar_gain(acceptance_log, sawtooth_model):
    rng = RngStream(404)
    config = {"eval_tasks": 2**9, "context_max": 30, "target_size": 100,
              "variant": "subtractive"}
    tasks = sawtooth_eval_tasks(config, rng.fork(0))
    ar_report, non_report = evaluate_ar_vs_marginal(
        sawtooth_model, tasks, rng.fork(1), "acceptance", train_context_max=130)
    gain = ar_report.mean - non_report.mean
    passed = gain >= 0.2
    record(acceptance_log, "4 trained CNP: AR strictly improves", passed,
           f"AR {ar_report.mean:.3f} vs non-AR {non_report.mean:.3f}, "
           f"gain {gain:.3f} (>= 0.2 required)")
    assert passed


def test_criterion_5_smooth_sample_recovery(acceptance_log):
    rng = RngStream(505)
    noise = 0.05
    mses = {}
    for i, n in enumerate((8, 16, 32, 64)):
        mses[n] = float(np.mean(smooth_sample_mse(noise, n, 200, rng.fork(i))))
    decreasing = mses[8] > mses[16] > mses[32] > mses[64]
    bound = mses[64] < noise / 2
    record(acceptance_log, "5 smooth-sample recovery", decreasing and bound,
           f"mse by grid {mses}, need decreasing and mse[64] < {noise / 2}")
    assert decreasing
    assert bound


def test_criterion_6_auxiliary_rollouts_improve_marginals(acceptance_log):
    from arcnp.ar import IdealCnpMixtureAdapter

    mix = heteroscedastic_mixture()
    adapter = IdealCnpMixtureAdapter(mix)
    rng = RngStream(606)
    config = {"context_max": 2, "targets": 4, "aux_points": 8, "trajectories": 64}
    gains = np.array([
        (lambda pair: pair[0] - pair[1])(auxar_case(mix, adapter, config, rng.fork(i)))
        for i in range(1000)
    ])
    se = gains.std(ddof=1) / np.sqrt(gains.size)
    passed = gains.mean() > 3 * se
    record(acceptance_log, "6 auxiliary-rollout marginal improvement", passed,
           f"gain {gains.mean():.4f} +- se {se:.4f} (need > 3 se)")
    assert passed


def test_criterion_7_gradient_correctness(acceptance_log):
    worst = 0.0
    for seed in range(20):
        config = CnpConfig(embedding_dim=8, encoder_width=8, encoder_depth=2,
                           decoder_width=8, decoder_depth=2)
        model = CnpModel(config, RngStream(seed))
        rng = RngStream(7000 + seed)
        tasks = [sample_gp_task(GpModel(), TaskSpec(context_size=(3, 3),
                                                    target_size=4), rng.fork(0)),
                 sample_gp_task(GpModel(), TaskSpec(context_size=(0, 0),
                                                    target_size=3), rng.fork(1))]
        _, grads = nll_loss(model, tasks)
        params = model.parameters()
        probe = RngStream(7100 + seed)
        step = 1e-4
        for p, g in zip(params, grads):
            idx = int(probe.integers(0, p.size))
            orig = p.flat[idx]
            p.flat[idx] = orig + step
            up, _ = nll_loss(model, tasks)
            p.flat[idx] = orig - step
            down, _ = nll_loss(model, tasks)
            p.flat[idx] = orig
            fd = (up - down) / (2 * step)
            tol = max(1e-4, 1e-2 * abs(g.flat[idx]))
            gap = abs(fd - g.flat[idx])
            worst = max(worst, gap / tol)
            assert gap < tol
    record(acceptance_log, "7 gradient correctness", True,
           f"20 seeds, worst |fd - grad| at {worst:.3f} of tolerance")


def test_criterion_8_population_dynamics_integrator(acceptance_log):
    from tests_rk4 import rk4_oracle

    params = LotkaVolterraParams.midpoint(sigma=0.0)
    # The literal drift form is the configuration under which a 0.01 step
    # meets the 1% tolerance; the classical default needs a finer step to
    # track its spiking orbit and is checked at 2e-4 as well.
    traj = simulate_lotka_volterra(params, RngStream(0), step=0.01,
                                   t_start=0.0, t_end=20.0, drift="literal")
    oracle = rk4_oracle(params, 0.0, 20.0, 0.01, "literal")
    got = np.column_stack([traj.prey, traj.predator]) / params.eta
    literal_err = float(np.abs(got - oracle).max() / np.abs(oracle).max())

    traj = simulate_lotka_volterra(params, RngStream(0), step=2e-4,
                                   t_start=0.0, t_end=20.0, drift="classical")
    oracle = rk4_oracle(params, 0.0, 20.0, 2e-4, "classical")
    got = np.column_stack([traj.prey, traj.predator]) / params.eta
    classical_err = float(np.abs(got - oracle).max() / np.abs(oracle).max())

    rng = RngStream(808)
    min_pop = np.inf
    for i in range(1000):
        p = LotkaVolterraParams.sample(rng.fork(i))
        t = simulate_lotka_volterra(p, rng.fork(10_000 + i), step=0.01)
        min_pop = min(min_pop, float(t.prey.min()), float(t.predator.min()))
    passed = literal_err < 0.01 and classical_err < 0.01 and min_pop >= 0.0
    record(acceptance_log, "8 population-dynamics integrator", passed,
           f"literal@0.01 err {literal_err:.4f}, classical@2e-4 err "
           f"{classical_err:.4f} (both < 0.01), min population {min_pop:.2e} >= 0")
    assert passed


def test_criterion_9_ordering_spread(acceptance_log, sawtooth_model):
    rng = RngStream(909)
    gp = GpModel()
    gp_tasks = [sample_gp_task(gp, TaskSpec(context_size=(3, 3), target_size=10),
                               rng.fork(i)) for i in range(8)]
    gp_spread = spread_over_tasks(IdealCnpGpAdapter(gp), gp_tasks, 8, rng.fork(100))
    adapter = CnpAdapter(sawtooth_model, train_context_max=130)
    spreads = {}
    for ctx in (0, 20):
        spec = TaskSpec(context_size=(ctx, ctx), target_size=24)
        tasks = [sample_sawtooth_task(spec, rng.fork(1000 * (ctx + 1) + i),
                                      variant="subtractive") for i in range(24)]
        values = spread_over_tasks(adapter, tasks, 10, rng.fork(200 + ctx))
        spreads[ctx] = float(values.mean())
    passed = (gp_spread.max() < 1e-9 and spreads[0] > 0.0
              and spreads[20] < spreads[0])
    record(acceptance_log, "9 ordering-spread diagnostic", passed,
           f"gp max spread {gp_spread.max():.2e} (< 1e-9), cnp spread "
           f"empty {spreads[0]:.4f} -> 20 ctx {spreads[20]:.4f} (decreasing)")
    assert gp_spread.max() < 1e-9
    assert spreads[0] > 0.0
    assert spreads[20] < spreads[0]


def test_criterion_10_manifest_reproducibility(acceptance_log, tmp_path):
    from arcnp.cli import main

    cfg = tmp_path / "exp.cfg"
    cfg.write_text("experiment = eq-kl\nn_tasks = 8\nar_tasks = 2\nar_mc = 2\n"
                   "target_size = 10\nseed = 17\n", encoding="utf-8")
    out1, out2 = tmp_path / "first", tmp_path / "second"
    assert main(["run", str(cfg), "--out", str(out1)]) == 0
    assert main(["run", str(out1 / "manifest.json"), "--out", str(out2)]) == 0
    identical = all(
        (out1 / name).read_bytes() == (out2 / name).read_bytes()
        for name in ("metrics.csv", "metrics.json", "samples.jsonl"))
    record(acceptance_log, "10 manifest reproducibility", identical,
           "metrics files byte-identical when rerun from the emitted manifest")
    assert identical
