import numpy as np
import pytest

from arcnp.ar import (
    AuxArPrediction,
    CnpAdapter,
    ContextSizeWarning,
    IdealCnpGpAdapter,
    IdealCnpMixtureAdapter,
    ModelAdapter,
    Ordering,
    ar_loglik_spread,
    ar_logpdf,
    ar_logpdf_task,
    ar_sample,
    aux_ar_predict,
    denoise,
    smooth_sample,
)
from arcnp.core import LOG_2PI, GaussianJoint, MarginalPrediction, RngStream, Task, gaussian_logpdf
from arcnp.generators import TaskSpec, sample_gp_task
from arcnp.neural import CnpConfig, CnpModel
from arcnp.oracles import (
    FunctionMixture,
    GpModel,
    gp_posterior,
    gram,
    heteroscedastic_mixture,
    ideal_cnp_mixture,
    mixture_true_logpdf_batch,
    sample_mixture_values,
)


def gp_adapter(noise=0.05):
    return IdealCnpGpAdapter(GpModel(noise_variance=noise))


def random_gp_task(seed, n_ctx, n_tgt):
    rng = RngStream(seed)
    spec = TaskSpec(context_size=(n_ctx, n_ctx), target_size=n_tgt)
    return sample_gp_task(GpModel(), spec, rng)


class TestOrdering:
    def test_kinds(self):
        tx = np.array([0.5, -1.0, 0.0])
        assert Ordering("given").resolve(tx, None).tolist() == [0, 1, 2]
        assert Ordering("left-to-right").resolve(tx, None).tolist() == [1, 2, 0]
        perm = Ordering("random", seed=3).resolve(tx, None)
        assert sorted(perm.tolist()) == [0, 1, 2]
        assert np.array_equal(perm, Ordering("random", seed=3).resolve(tx, None))

    def test_random_needs_stream(self):
        with pytest.raises(ValueError):
            Ordering("random").resolve(np.zeros(3), None)

    def test_invalid_kind_and_permutation(self):
        with pytest.raises(ValueError):
            Ordering("sideways")
        with pytest.raises(ValueError):
            ar_logpdf(gp_adapter(), np.empty(0), np.empty(0), np.zeros(2),
                      np.zeros(2), ordering=[0, 0])


class TestArSample:
    def test_single_target_equals_marginal_draw(self):
        adapter = gp_adapter()
        task = random_gp_task(0, 3, 1)
        traj = ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                         RngStream(5), ordering="given")
        pred = adapter.predict(task.context_x, task.context_y, task.target_x)
        expected = pred.means + np.sqrt(pred.variances) * RngStream(5).standard_normal(1)
        assert np.array_equal(traj.ys, expected)

    def test_block_equal_to_target_count_is_one_forward_pass(self):
        adapter = gp_adapter()
        task = random_gp_task(1, 4, 6)
        traj = ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                         RngStream(6), ordering="given", block_size=6)
        pred = adapter.predict(task.context_x, task.context_y, task.target_x)
        expected = pred.means + np.sqrt(pred.variances) * RngStream(6).standard_normal(6)
        assert np.array_equal(traj.ys, expected)

    def test_intermediate_block_sizes_cover_all_targets(self):
        adapter = gp_adapter()
        task = random_gp_task(2, 2, 7)
        for k in (1, 2, 3, 7, 50):
            traj = ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                             RngStream(7), ordering="random", block_size=k)
            assert len(traj) == 7
            assert sorted(traj.permutation.tolist()) == list(range(7))
            assert np.array_equal(traj.xs, task.target_x[traj.permutation])

    def test_values_in_target_order(self):
        adapter = gp_adapter()
        task = random_gp_task(3, 2, 5)
        traj = ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                         RngStream(8), ordering="random")
        restored = traj.values_in_target_order()
        for visit_pos, target_idx in enumerate(traj.permutation):
            assert restored[target_idx] == traj.ys[visit_pos]

    def test_empty_targets_give_empty_trajectory(self):
        adapter = gp_adapter()
        traj = ar_sample(adapter, np.array([0.0]), np.array([1.0]), np.empty(0),
                         RngStream(9))
        assert len(traj) == 0

    def test_bit_reproducible(self):
        adapter = gp_adapter()
        task = random_gp_task(4, 3, 8)
        a = ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                      RngStream(10), ordering="random")
        b = ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                      RngStream(10), ordering="random")
        assert np.array_equal(a.ys, b.ys)
        assert np.array_equal(a.permutation, b.permutation)

    def test_rejects_bad_block_size(self):
        with pytest.raises(ValueError):
            ar_sample(gp_adapter(), np.empty(0), np.empty(0), np.zeros(2),
                      RngStream(0), block_size=0)

    def test_context_budget_warning(self):
        model = CnpModel(CnpConfig(embedding_dim=8, encoder_width=8, encoder_depth=2,
                                   decoder_width=8, decoder_depth=2), RngStream(0))
        adapter = CnpAdapter(model, train_context_max=4)
        task = random_gp_task(5, 2, 6)
        with pytest.warns(ContextSizeWarning):
            ar_sample(adapter, task.context_x, task.context_y, task.target_x,
                      RngStream(11), ordering="given")


class TestArLogpdf:
    def test_single_target_is_marginal_logpdf(self):
        adapter = gp_adapter()
        task = random_gp_task(6, 4, 1)
        pred = adapter.predict(task.context_x, task.context_y, task.target_x)
        got = ar_logpdf_task(adapter, task, ordering="given")
        assert got == pytest.approx(pred.logpdf(task.target_y), abs=1e-12)

    def test_chain_rule_matches_exact_joint_for_gp_truth(self):
        # Sequential exact-Gaussian conditioning reproduces the joint, for
        # any ordering: 20 random tasks, up to 10 targets.
        model = GpModel()
        adapter = IdealCnpGpAdapter(model)
        rng = RngStream(12)
        for i in range(20):
            n_tgt = int(rng.integers(1, 11))
            n_ctx = int(rng.integers(0, 6))
            task = sample_gp_task(model, TaskSpec(context_size=(n_ctx, n_ctx),
                                                  target_size=n_tgt), rng.fork(i))
            joint = gp_posterior(model, task.context_x, task.context_y, task.target_x)
            exact = gaussian_logpdf(task.target_y, joint)
            got = ar_logpdf_task(adapter, task, ordering=rng.permutation(n_tgt))
            assert got == pytest.approx(exact, abs=1e-6)

    def test_empty_targets_logpdf_zero(self):
        adapter = gp_adapter()
        assert ar_logpdf(adapter, np.array([0.0]), np.array([1.0]), np.empty(0),
                         np.empty(0)) == 0.0

    def test_values_length_checked(self):
        with pytest.raises(ValueError):
            ar_logpdf(gp_adapter(), np.empty(0), np.empty(0), np.zeros(3), np.zeros(2))

    def test_deterministic_given_ordering(self):
        adapter = gp_adapter()
        task = random_gp_task(7, 3, 5)
        a = ar_logpdf_task(adapter, task, ordering="left-to-right")
        b = ar_logpdf_task(adapter, task, ordering="left-to-right")
        assert a == b


class TestOrderingSpread:
    def test_gp_adapter_has_zero_spread(self):
        adapter = gp_adapter()
        task = random_gp_task(8, 4, 8)
        mean, std = ar_loglik_spread(adapter, task, n_orderings=10, rng=RngStream(13))
        assert std < 1e-9
        joint = gp_posterior(adapter.model, task.context_x, task.context_y,
                             task.target_x)
        assert mean == pytest.approx(gaussian_logpdf(task.target_y, joint), abs=1e-6)

    def test_single_ordering_reports_zero_std(self):
        adapter = gp_adapter()
        task = random_gp_task(9, 2, 4)
        _, std = ar_loglik_spread(adapter, task, n_orderings=1, rng=RngStream(14))
        assert std == 0.0

    def test_mixture_adapter_has_positive_spread(self):
        # A factorized approximation of a multimodal truth is ordering
        # sensitive when the context leaves several components alive.
        adapter = IdealCnpMixtureAdapter(FunctionMixture())
        task = Task(context_x=np.empty(0), context_y=np.empty(0),
                    target_x=np.array([1.0, 2.0, 4.0, 6.0]),
                    target_y=np.array([2.0, 3.0, 5.0, 7.0]))
        _, std = ar_loglik_spread(adapter, task, n_orderings=12, rng=RngStream(15))
        assert std > 1e-3


class TestSmoothSample:
    def test_noiseless_interpolation_identity(self):
        # With zero observation noise the denoising pass interpolates the
        # trajectory exactly at its own grid points.
        adapter = gp_adapter(noise=0.0)
        grid = np.linspace(-2, 2, 6)
        traj, denoised = smooth_sample(adapter, np.empty(0), np.empty(0), grid, grid,
                                       RngStream(16), ordering="random")
        assert np.allclose(denoised, traj.values_in_target_order(), atol=1e-9)

    def test_query_shape_contract(self):
        adapter = gp_adapter()
        grid = np.linspace(-2, 2, 8)
        query = np.array([-1.7, 0.33, 0.34, 1.9])
        traj, denoised = smooth_sample(adapter, np.array([0.0]), np.array([0.5]),
                                       grid, query, RngStream(17))
        assert len(traj) == 8
        assert denoised.shape == (4,)
        assert np.all(np.isfinite(denoised))

    def test_recovery_error_shrinks_with_grid_density(self):
        # Generative pairing: draw the latent function and noisy grid
        # observations from the exact GP, then denoise; the squared gap to
        # the latent draw shrinks as the grid grows.
        model = GpModel()
        adapter = IdealCnpGpAdapter(model)
        mses = {}
        for n in (8, 32):
            errs = []
            for seed in range(40):
                rng = RngStream(1000 + seed)
                gx = np.sort(rng.uniform(-2, 2, n))
                cov = gram(model.kernel, gx, gx)
                f = GaussianJoint(np.zeros(n), cov + 1e-10 * np.eye(n)).sample(rng)
                y = f + np.sqrt(model.noise_variance) * rng.standard_normal(n)
                rec = denoise(adapter, np.empty(0), np.empty(0), gx, y, gx)
                errs.append(np.mean((rec - f) ** 2))
            mses[n] = float(np.mean(errs))
        assert mses[32] < mses[8]


class FixedAdapter(ModelAdapter):
    """Predicts constant marginals; used to pin transform arithmetic."""

    def __init__(self, mean, var, transform="identity"):
        self.mean, self.var = mean, var
        self.transform = transform

    def predict(self, context_x, context_y, target_x,
                context_channel=None, target_channel=None):
        n = np.asarray(target_x).size
        return MarginalPrediction(np.full(n, self.mean), np.full(n, self.var))


class TestOutputTransform:
    def test_log1p_logpdf_includes_jacobian(self):
        adapter = FixedAdapter(mean=0.3, var=0.5, transform="log1p")
        y = np.array([2.0])
        z = np.log1p(y)
        expected = (-0.5 * (LOG_2PI + np.log(0.5) + (z[0] - 0.3) ** 2 / 0.5)
                    - np.log1p(y[0]))
        got = ar_logpdf(adapter, np.empty(0), np.empty(0), np.array([0.0]), y)
        assert got == pytest.approx(expected, abs=1e-12)

    def test_log1p_sampling_inverts_transform(self):
        adapter = FixedAdapter(mean=1.0, var=0.25, transform="log1p")
        traj = ar_sample(adapter, np.empty(0), np.empty(0), np.array([0.0]),
                         RngStream(18), ordering="given")
        z = 1.0 + 0.5 * RngStream(18).standard_normal(1)
        assert traj.ys[0] == pytest.approx(np.expm1(z)[0], abs=1e-12)

    def test_identity_jacobian_is_zero(self):
        adapter = FixedAdapter(mean=0.0, var=1.0)
        assert np.all(adapter.log_jacobian(np.array([1.0, 2.0])) == 0.0)


class TestAuxAr:
    def test_zero_aux_points_is_plain_marginal(self):
        adapter = IdealCnpMixtureAdapter(heteroscedastic_mixture())
        cx, cy = np.array([0.5]), np.array([0.4])
        tx = np.array([1.0, -1.0])
        pred = aux_ar_predict(adapter, cx, cy, tx,
                              lambda n, rng: rng.uniform(-2, 2, n), 0, 64,
                              RngStream(19))
        plain = adapter.predict(cx, cy, tx)
        assert pred.n_components == 1
        assert np.array_equal(pred.means[0], plain.means)
        assert np.array_equal(pred.variances[0], plain.variances)
        values = np.array([0.7, -0.2])
        per_point = (-0.5 * (LOG_2PI + np.log(plain.variances)
                             + (values - plain.means) ** 2 / plain.variances))
        assert np.allclose(pred.logpdf(values), per_point, atol=1e-12)

    def test_single_trajectory_zero_aux_same(self):
        adapter = IdealCnpMixtureAdapter(heteroscedastic_mixture())
        pred = aux_ar_predict(adapter, np.empty(0), np.empty(0), np.array([0.0]),
                              lambda n, rng: rng.uniform(-2, 2, n), 0, 1,
                              RngStream(20))
        assert pred.n_components == 1

    def test_mixture_marginal_beats_gaussian_on_multimodal_truth(self):
        # With little context, the truth marginal is multimodal; averaging
        # over auxiliary rollouts recovers that shape while the plain
        # moment-matched Gaussian cannot.
        mix = heteroscedastic_mixture()
        adapter = IdealCnpMixtureAdapter(mix)
        rng = RngStream(21)
        gains = []
        for i in range(150):
            task_rng = rng.fork(i)
            n_ctx = int(task_rng.integers(0, 3))
            cx = task_rng.uniform(-2, 2, n_ctx)
            cy = sample_mixture_values(mix, np.empty(0), np.empty(0), cx, 1,
                                       task_rng)[0] if n_ctx else np.empty(0)
            tx = task_rng.uniform(-2, 2, 4)
            ty = sample_mixture_values(mix, cx, cy, tx, 1, task_rng)[0]
            enriched = aux_ar_predict(adapter, cx, cy, tx,
                                      lambda n, r: r.uniform(-2, 2, n), 8, 64,
                                      task_rng)
            plain = adapter.predict(cx, cy, tx)
            gains.append(enriched.logpdf(ty).mean() - plain.logpdf(ty) / tx.size)
        gains = np.array(gains)
        se = gains.std(ddof=1) / np.sqrt(gains.size)
        assert gains.mean() > 3 * se

    def test_parameter_validation(self):
        adapter = FixedAdapter(0.0, 1.0)
        with pytest.raises(ValueError):
            aux_ar_predict(adapter, np.empty(0), np.empty(0), np.zeros(1),
                           lambda n, rng: np.zeros(n), -1, 4, RngStream(0))
        with pytest.raises(ValueError):
            aux_ar_predict(adapter, np.empty(0), np.empty(0), np.zeros(1),
                           lambda n, rng: np.zeros(n), 2, 0, RngStream(0))


class TestArAdvantageOverJointGaussian:
    def test_mixture_inequality_directional(self):
        # KL(truth, AR factorized) <= KL(truth, moment-matched joint
        # Gaussian): checked by shared-sample Monte Carlo on three contexts.
        from arcnp.core import gaussian_logpdf_batch
        from arcnp.oracles import ideal_gnp_mixture

        mix = FunctionMixture()
        adapter = IdealCnpMixtureAdapter(mix)
        targets = np.array([1.0, 2.0, 4.0, 6.0])
        rng = RngStream(22)
        for case in range(3):
            case_rng = rng.fork(case)
            n_ctx = int(case_rng.integers(0, 4))
            cx = case_rng.uniform(-2, 6, n_ctx)
            cy = (sample_mixture_values(mix, np.empty(0), np.empty(0), cx, 1,
                                        case_rng)[0] if n_ctx else np.empty(0))
            perm = case_rng.permutation(4)
            draws = sample_mixture_values(mix, cx, cy, targets, 3000, case_rng)
            log_ar = np.array([
                ar_logpdf(adapter, cx, cy, targets, row, ordering=perm)
                for row in draws])
            gnp = ideal_gnp_mixture(mix, cx, cy, targets)
            log_gnp = gaussian_logpdf_batch(draws, gnp)
            diffs = log_gnp - log_ar  # KL(truth,AR) - KL(truth,GNP) estimator
            mean = diffs.mean()
            se = diffs.std(ddof=1) / np.sqrt(diffs.size)
            assert mean <= 3 * se
