"""
Pruebas de la verificación numérica (covarianzas Monte Carlo y residuales).
"""

import math

import numpy as np
import pytest

from src.dynamics import init_function_state
from src.finite_net import BottleneckMlp, MlpSpec
from src.init_oracle import init_wide_net
from src.kernel_core import BottleneckKernels
from src.verify import (
    KINDS,
    DeviationReport,
    ResidualSeries,
    covariance_deviation,
    finite_residuals,
    function_space_trajectory,
    linear_residuals,
    mc_covariance_deviation,
    random_input_pairs,
    record_finite_trajectory,
    residual_errors,
    theory_covariance,
)


X = np.array([0.9, -0.4])
XT = np.array([0.2, 1.3])


# ============================================================================
# Covarianzas teóricas
# ============================================================================

class TestTheoryCovariance:

    def test_shapes(self):
        assert theory_covariance("ff", X, XT).shape == (2, 2)
        assert theory_covariance("Jf", X, XT).shape == (3, 3)
        assert theory_covariance("JJ", X, XT).shape == (4, 4)

    def test_ff_diagonal(self):
        cov = theory_covariance("ff", X, XT)
        assert cov[0, 0] == pytest.approx(float(X @ X) / 4.0)
        assert cov[0, 1] == pytest.approx(cov[1, 0])

    @pytest.mark.parametrize("kind", KINDS)
    def test_symmetric(self, kind):
        cov = theory_covariance(kind, X, XT)
        np.testing.assert_allclose(cov, cov.T, atol=1e-10)

    def test_linear_joint_covariance(self):
        cov = theory_covariance("Jf", X, XT, activation="linear")
        assert cov[0, 0] == pytest.approx(float(X @ X) / 2.0)
        np.testing.assert_allclose(cov[0, 1:], X / 2.0)
        np.testing.assert_allclose(cov[1:, 1:], np.eye(2) / 2.0)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            theory_covariance("fJ", X, XT)
        with pytest.raises(ValueError):
            theory_covariance("ff", X, np.ones(3))


class TestCovarianceDeviation:

    def test_scale_invariant(self):
        rng = np.random.default_rng(0)
        empirical = rng.standard_normal((3, 3))
        theory = rng.standard_normal((3, 3))
        assert covariance_deviation(4.0 * empirical, 4.0 * theory) == pytest.approx(
            covariance_deviation(empirical, theory))

    def test_zero_theory(self):
        with pytest.raises(ValueError):
            covariance_deviation(np.ones((2, 2)), np.zeros((2, 2)))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            covariance_deviation(np.ones((2, 2)), np.ones((3, 3)))


# ============================================================================
# Monte Carlo
# ============================================================================

class TestMonteCarlo:

    def test_hook_returning_theory_gives_zero(self):
        pairs = random_input_pairs(2, seed=4)
        reports = mc_covariance_deviation("JJ", pairs, n=10, replicas=100,
                                          empirical_hook=lambda kind, pair_id, theory: theory)
        assert [report.pair_id for report in reports] == [0, 1]
        assert all(report.deviation == 0.0 and report.stderr == 0.0 for report in reports)
        assert all(report.passes(0.0) for report in reports)

    def test_too_few_replicas(self):
        with pytest.raises(ValueError):
            mc_covariance_deviation("ff", random_input_pairs(1), n=10, replicas=99)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            mc_covariance_deviation("gg", random_input_pairs(1), n=10, replicas=100)

    def test_linear_network_is_exact_in_expectation(self):
        reports = mc_covariance_deviation("Jf", random_input_pairs(2, seed=1), n=20, replicas=2000,
                                          activation="linear")
        for report in reports:
            assert report.deviation < 0.2
            assert report.stderr > 0.0

    def test_reproducible_across_workers(self):
        pairs = random_input_pairs(1, seed=2)
        serial = mc_covariance_deviation("ff", pairs, n=50, replicas=200, seed=7)
        threaded = mc_covariance_deviation("ff", pairs, n=50, replicas=200, seed=7, workers=3)
        assert serial[0].deviation == threaded[0].deviation
        assert serial[0].stderr == threaded[0].stderr

    def test_jackknife_blocks_from_config(self, override_config):
        pairs = random_input_pairs(1, seed=3)
        default = mc_covariance_deviation("ff", pairs, n=20, replicas=200, seed=1)[0]
        override_config({"verificacion": {"bloques_jackknife": 2}})
        configured = mc_covariance_deviation("ff", pairs, n=20, replicas=200, seed=1)[0]
        explicit = mc_covariance_deviation("ff", pairs, n=20, replicas=200, seed=1, blocks=2)[0]

        assert configured.deviation == pytest.approx(default.deviation, rel=1e-9)
        assert configured.stderr == explicit.stderr
        assert configured.stderr != default.stderr

    @pytest.mark.parametrize("blocks", [1, 201])
    def test_jackknife_blocks_out_of_range(self, blocks):
        with pytest.raises(ValueError):
            mc_covariance_deviation("ff", random_input_pairs(1), n=10, replicas=200, blocks=blocks)

    def test_random_input_pairs(self):
        pairs = random_input_pairs(3, dim=4, seed=5)
        assert len(pairs) == 3
        assert pairs[0][0].shape == (4,)
        np.testing.assert_array_equal(pairs[2][1], random_input_pairs(3, dim=4, seed=5)[2][1])
        with pytest.raises(ValueError):
            random_input_pairs(0)


class TestReports:

    def test_passes_uses_two_standard_errors(self):
        report = DeviationReport("ff", 0, 100, 1000, deviation=0.3, stderr=0.05)
        assert report.passes(0.25)
        assert not report.passes(0.15)
        assert report.as_row() == ["ff", 0, 100, 1000, 0.3, 0.05]

    def test_residual_series(self):
        series = ResidualSeries("g", np.array([0.1, math.nan, 0.3, 0.5]), None, 1e-3, 3)
        assert series.median() == pytest.approx(0.3)
        assert series.median(first=2) == pytest.approx(0.1)
        assert series.rows()[0] == ["g", 0, 0.1, "", 3, 1e-3]
        assert math.isnan(ResidualSeries("f", np.array([math.nan]), 5, 0.1, 1).median())


# ============================================================================
# Trayectorias y residuales
# ============================================================================

@pytest.fixture
def small_net():
    return BottleneckMlp(MlpSpec.four_layer(4, 32, 2, 2, "relu", seed=3))


class TestTrajectories:

    def test_one_step_gives_two_checkpoints(self, small_net, small_regression):
        checkpoints = record_finite_trajectory(small_net, small_regression.train_x,
                                               small_regression.train_y, lr=0.01, steps=1)
        assert [checkpoint.step for checkpoint in checkpoints] == [0, 1]
        assert checkpoints[0].J_train.shape == (12, 2, 2)
        np.testing.assert_allclose(checkpoints[0].probe, checkpoints[0].g_values[0])

    def test_zero_learning_rate_keeps_values(self, small_net, small_regression):
        checkpoints = record_finite_trajectory(small_net, small_regression.train_x,
                                               small_regression.train_y, lr=0.0, steps=2)
        for checkpoint in checkpoints[1:]:
            np.testing.assert_array_equal(checkpoint.f_values, checkpoints[0].f_values)
            np.testing.assert_array_equal(checkpoint.J_probe, checkpoints[0].J_probe)

    def test_source_net_is_untouched(self, small_net, small_regression):
        before = [weight.copy() for weight in small_net.layers]
        record_finite_trajectory(small_net, small_regression.train_x, small_regression.train_y,
                                 lr=0.1, steps=2)
        for saved, weight in zip(before, small_net.layers):
            np.testing.assert_array_equal(saved, weight)

    def test_residual_errors_validation(self, small_net, small_regression):
        checkpoints = record_finite_trajectory(small_net, small_regression.train_x,
                                               small_regression.train_y, lr=0.01, steps=1)
        kernels = BottleneckKernels.relu(4, 2)
        with pytest.raises(ValueError):
            residual_errors(checkpoints[:1], kernels, small_regression.train_x, 0.01)
        with pytest.raises(ValueError):
            residual_errors(checkpoints, kernels, small_regression.train_x, 0.0)


class TestResiduals:

    def test_function_space_integrator_satisfies_its_equations(self, small_regression):
        oracle = init_wide_net((4, 2, 2), width=64, seed=0)
        kernels = BottleneckKernels.relu(4, 2)
        state = init_function_state(small_regression, oracle, kernels, 0.01,
                                    mode="bottleneck_gradient_flow_euler")
        checkpoints = function_space_trajectory(state, small_regression.train_y, steps=3)
        assert len(checkpoints) == 4

        series = residual_errors(checkpoints, kernels, small_regression.train_x, 0.01)
        for quantity in ("f", "g", "J"):
            assert np.nanmax(series[quantity].residuals) < 1e-6

    def test_function_space_requires_gradient_flow(self, small_regression):
        oracle = init_wide_net((4, 2, 2), width=16, seed=0)
        state = init_function_state(small_regression, oracle, BottleneckKernels.relu(4, 2), 0.01)
        with pytest.raises(ValueError):
            function_space_trajectory(state, small_regression.train_y, steps=1)

    def test_effective_linear_net_is_exact_to_first_order(self, small_regression):
        series = linear_residuals("effective2", small_regression.train_x, small_regression.train_y,
                                  n=1, bottleneck_dim=2, lr=1e-4, steps=5)
        assert series["g"].median() < 1e-6
        assert series["J"].median() < 1e-6
        assert series["f"].median() < 1e-2

    def test_unknown_linear_mode(self, small_regression):
        with pytest.raises(ValueError):
            linear_residuals("deep3", small_regression.train_x, small_regression.train_y, 8, 2)

    def test_finite_residual_shapes(self, small_regression):
        series = finite_residuals(small_regression.train_x, small_regression.train_y, n=32,
                                  bottleneck_dim=2, lr=1e-3, steps=3)
        assert set(series) == {"f", "g", "J"}
        assert all(len(values.residuals) == 3 for values in series.values())
        assert series["g"].n == 32


# ============================================================================
# Experimentos a escala de escritorio
# ============================================================================

@pytest.mark.slow
@pytest.mark.parametrize("kind", KINDS)
def test_relu_covariances_converge(kind):
    reports = mc_covariance_deviation(kind, random_input_pairs(2, seed=0), n=2000, replicas=2000,
                                      workers=4)
    for report in reports:
        assert report.passes(0.15)


@pytest.mark.slow
def test_wide_net_residuals_are_small_and_shrink():
    rng = np.random.default_rng(0)
    inputs = rng.standard_normal((20, 10))
    targets = inputs @ rng.standard_normal((10, 1)) / np.sqrt(10)
    wide = finite_residuals(inputs, targets, n=20000, bottleneck_dim=3, lr=1e-3, steps=100)
    narrow = finite_residuals(inputs, targets, n=2000, bottleneck_dim=3, lr=1e-3, steps=100)
    for quantity in ("f", "g", "J"):
        assert wide[quantity].median() <= 0.1
        assert narrow[quantity].median() > wide[quantity].median()


@pytest.mark.slow
def test_deep_linear_residuals_shrink_with_width(small_regression):
    narrow = linear_residuals("deep4", small_regression.train_x, small_regression.train_y,
                              n=50, bottleneck_dim=2, lr=1e-4, steps=20)
    wide = linear_residuals("deep4", small_regression.train_x, small_regression.train_y,
                            n=5000, bottleneck_dim=2, lr=1e-4, steps=20)
    assert wide["g"].median() < narrow["g"].median()
