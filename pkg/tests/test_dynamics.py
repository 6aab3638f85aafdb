"""
Pruebas del entrenador en espacio de funciones.

El ejemplo escalar usa g(ξ) = 2ξ, f(x) = 3x, kernels lineales con
d₀ = d = d_r = 1, μ = 0.1, ξ = 1 e y = 0; tras un paso:
g₁ = 0.2, J₁ = 1.8 y F₁ = 5.76.
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from src.data import Dataset, gen_projection_labels, gen_synthetic_gp
from src.dynamics import (
    TrainConfig,
    build_kernels,
    build_state,
    eval_F,
    eval_J,
    gradient_flow_step,
    history_consistency,
    init_function_state,
    load_checkpoint,
    mse_loss_derivative,
    ntk_baseline_step,
    run_training,
    sgd_step,
    train_vs_test_curve,
)
from src.errors import NumericalAbort
from src.finite_net import BottleneckMlp, MlpSpec, forward, sgd_update
from src.init_oracle import init_wide_net, snapshot_from_weights
from src.kernel_core import BottleneckKernels
from src.run_manifest import MetricRow


@pytest.fixture
def hand_oracle():
    return snapshot_from_weights([[[2.0]], [[1.0]]], [[3.0]], [[1.0]], "linear")


def _hand_state(dataset, oracle, lr=0.1, **kwargs):
    return init_function_state(dataset, oracle, BottleneckKernels.linear(1, 1), lr, **kwargs)


# ============================================================================
# Ejemplo evaluable a mano
# ============================================================================

class TestHandExample:

    def test_initial_values(self, one_sample_dataset, hand_oracle):
        state = _hand_state(one_sample_dataset, hand_oracle)
        np.testing.assert_allclose(eval_F(state, "train"), [[6.0]])
        np.testing.assert_allclose(state.train_g, [[2.0]])
        np.testing.assert_allclose(eval_J(state, np.array([5.0])), [[3.0]])

    def test_one_sgd_step(self, one_sample_dataset, hand_oracle):
        state = _hand_state(one_sample_dataset, hand_oracle)
        sgd_step(state, [0], np.array([[0.0]]))

        assert state.step == 1
        assert len(state.history) == 1
        np.testing.assert_allclose(state.history[0].p_batch, [[18.0]])
        np.testing.assert_allclose(state.train_g, [[0.2]])
        for x in (0.2, -1.0, 7.0):
            np.testing.assert_allclose(eval_J(state, np.array([x])), [[1.8]])
        np.testing.assert_allclose(eval_F(state, "train"), [[5.76]])

    def test_moving_anchor(self, one_sample_dataset, hand_oracle):
        state = _hand_state(one_sample_dataset, hand_oracle, output_anchor="moving")
        sgd_step(state, [0], np.array([[0.0]]))
        np.testing.assert_allclose(eval_F(state, "train"), [[0.6 - 0.24]])

    def test_new_inputs_replay_history(self, one_sample_dataset, hand_oracle):
        state = _hand_state(one_sample_dataset, hand_oracle)
        sgd_step(state, [0], np.array([[0.0]]))
        np.testing.assert_allclose(eval_F(state, np.array([[1.0], [2.0]])), [[5.76], [11.52]])

    def test_zero_learning_rate_freezes(self, one_sample_dataset, hand_oracle):
        state = _hand_state(one_sample_dataset, hand_oracle, lr=0.0)
        for _ in range(3):
            sgd_step(state, [0], np.array([[0.0]]))
        np.testing.assert_allclose(state.train_g, [[2.0]])
        np.testing.assert_allclose(eval_F(state, "train"), [[6.0]])
        np.testing.assert_allclose(eval_J(state, np.array([1.0])), [[3.0]])

    def test_gradient_flow_step(self, one_sample_dataset, hand_oracle):
        state = _hand_state(one_sample_dataset, hand_oracle, mode="bottleneck_gradient_flow_euler")
        gradient_flow_step(state, np.array([[0.0]]))
        # Ḟ = −μ(K(2, 2)·6 + J·Θ·p) = −0.1·(24 + 54)
        np.testing.assert_allclose(eval_F(state, "train"), [[6.0 - 7.8]])
        np.testing.assert_allclose(state.train_g, [[0.2]])
        with pytest.raises(ValueError):
            eval_F(state, np.array([[1.0]]))

    def test_invalid_batch(self, one_sample_dataset, hand_oracle):
        state = _hand_state(one_sample_dataset, hand_oracle)
        with pytest.raises(ValueError):
            sgd_step(state, [3], np.array([[0.0]]))

    def test_non_finite_chi_aborts(self, one_sample_dataset, hand_oracle):
        state = _hand_state(one_sample_dataset, hand_oracle)
        with pytest.raises(NumericalAbort):
            sgd_step(state, [0], np.array([[np.inf]]))


def test_mse_loss_derivative():
    np.testing.assert_allclose(mse_loss_derivative([[1.0, 2.0]], [[0.0, 2.0]]), [[1.0, 0.0]])
    with pytest.raises(ValueError):
        mse_loss_derivative([[1.0]], [[1.0, 2.0]])


# ============================================================================
# Configuración
# ============================================================================

class TestTrainConfig:

    def test_infinite_bottleneck_forces_baseline(self):
        config = TrainConfig(lr=0.1, bottleneck_dim=None)
        assert config.resolved_mode == "infinite_ntk_baseline"
        assert config.width_label == "inf"

    @pytest.mark.parametrize("kwargs", [
        {"lr": -1.0},
        {"lr": math.nan},
        {"lr": 0.1, "eval_every": 0},
        {"lr": 0.1, "mode": "adam"},
        {"lr": 0.1, "output_anchor": "final"},
        {"lr": 0.1, "activation": "tanh"},
        {"lr": 0.1, "bottleneck_dim": 0},
    ])
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


# ============================================================================
# Línea base con cuello infinito
# ============================================================================

class TestBaseline:

    def test_linear_step(self, one_sample_dataset):
        config = TrainConfig(lr=0.1, bottleneck_dim=None, activation="linear", batch_size=1)
        state = build_state(config, one_sample_dataset)
        F0 = state.train_F.copy()
        # Θ_deep = 2ξξ̃/d₀ para dos matrices lineales
        ntk_baseline_step(state, [0], np.array([[0.0]]))
        np.testing.assert_allclose(state.train_F, F0 * (1.0 - 0.1 * 2.0))
        assert state.history == []

    def test_run_training_reduces_loss(self, small_regression):
        config = TrainConfig(lr=0.05, bottleneck_dim=None, batch_size=4, steps=20, eval_every=10)
        rows = run_training(config, small_regression)
        assert [row.step for row in rows] == [0, 10, 20]
        assert rows[-1].mode == "infinite_ntk_baseline"
        assert rows[-1].train_loss < rows[0].train_loss


# ============================================================================
# Bucle de entrenamiento
# ============================================================================

@pytest.fixture
def relu_config():
    return TrainConfig(lr=0.05, batch_size=4, steps=6, eval_every=3, bottleneck_dim=2,
                       oracle_width=64, seed=1)


class TestRunTraining:

    def test_zero_steps_emits_initial_row(self, small_regression, relu_config):
        rows = run_training(replace(relu_config, steps=0), small_regression)
        assert len(rows) == 1
        assert rows[0].step == 0
        assert math.isnan(rows[0].train_acc)

    def test_rows_and_history(self, small_regression, relu_config):
        seen = []
        rows = run_training(relu_config, small_regression, on_metrics=seen.append)
        assert [row.step for row in rows] == [0, 3, 6]
        assert seen == rows
        assert all(row.bottleneck_width == 2 for row in rows)

    def test_incremental_embeddings_match_replay(self, small_regression, relu_config):
        state = build_state(relu_config, small_regression)
        run_training(relu_config, small_regression, state=state)
        assert state.step == 6
        assert history_consistency(state) < 1e-10

    def test_history_entries_are_views_of_buffer(self, small_regression, relu_config):
        state = build_state(relu_config, small_regression)
        run_training(relu_config, small_regression, state=state)
        assert state.buffer.step_sizes == [4] * 6
        assert state.buffer.size == 24

        entries = state.history
        assert len(entries) == 6
        assert all(np.shares_memory(entry.g_batch, state.buffer.g) for entry in entries)
        np.testing.assert_array_equal(np.concatenate([entry.p_batch for entry in entries]),
                                      state.buffer.p)
        np.testing.assert_array_equal(np.concatenate([entry.batch_indices for entry in entries]),
                                      state.buffer.indices)

    def test_workers_do_not_change_results(self, small_regression, relu_config):
        serial = run_training(relu_config, small_regression)
        threaded = run_training(relu_config, small_regression, workers=3)
        assert serial[-1].train_loss == pytest.approx(threaded[-1].train_loss, rel=1e-12)

    def test_classification_accuracy(self, small_classification):
        config = TrainConfig(lr=0.05, batch_size=5, steps=2, eval_every=1, bottleneck_dim=3,
                             oracle_width=32)
        rows = run_training(config, small_classification)
        assert 0.0 <= rows[-1].train_acc <= 1.0
        assert 0.0 <= rows[-1].test_acc <= 1.0

    def test_checkpoint_resume_matches_uninterrupted(self, small_regression, relu_config, tmp_path):
        full = run_training(relu_config, small_regression)

        path = str(tmp_path / "estado.fsd")
        run_training(replace(relu_config, steps=3), small_regression, checkpoint_path=path)
        state = load_checkpoint(path, relu_config, small_regression)
        assert state.step == 3
        assert len(state.history) == 3
        assert state.buffer.step_sizes == [4, 4, 4]
        resumed = run_training(relu_config, small_regression, state=state)

        assert resumed[0].step == 3
        assert resumed[-1].train_loss == pytest.approx(full[-1].train_loss, rel=1e-10)
        assert resumed[-1].test_loss == pytest.approx(full[-1].test_loss, rel=1e-10)

    def test_checkpoint_mode_mismatch(self, small_regression, relu_config, tmp_path):
        path = str(tmp_path / "estado.fsd")
        run_training(replace(relu_config, steps=1), small_regression, checkpoint_path=path)
        with pytest.raises(ValueError):
            load_checkpoint(path, replace(relu_config, bottleneck_dim=None), small_regression)


# ============================================================================
# Curvas train vs test
# ============================================================================

def _rows(width, train_losses, offset):
    return [MetricRow(step, 0.0, loss, loss + offset, math.nan, math.nan, width, "bottleneck_sgd", 0)
            for step, loss in enumerate(train_losses)]


class TestTrainVsTestCurve:

    def test_common_range_and_offset(self):
        curves = {
            1: _rows(1, [1.0, 0.6, 0.3, 0.1], 0.5),
            8: _rows(8, [0.9, 0.5, 0.2], 0.1),
        }
        rows = train_vs_test_curve(curves, points=10, window=3)
        assert len(rows) == 16
        for width, train, test in rows:
            assert 0.2 <= train <= 0.9
            assert test - train == pytest.approx(0.5 if width == 1 else 0.1)

    def test_disjoint_ranges(self):
        curves = {1: _rows(1, [1.0, 0.9], 0.0), 2: _rows(2, [0.5, 0.4], 0.0)}
        assert train_vs_test_curve(curves) == []

    def test_nan_test_losses_are_skipped(self):
        rows = [MetricRow(0, 0.0, 1.0, math.nan, math.nan, math.nan, 4, "bottleneck_sgd", 0)]
        assert train_vs_test_curve({4: rows}) == []


# ============================================================================
# Convergencia del flujo de gradiente
# ============================================================================

def _euler_final_F(dataset, oracle, lr, steps):
    state = _hand_state(dataset, oracle, lr=lr, mode="bottleneck_gradient_flow_euler")
    for _ in range(steps):
        gradient_flow_step(state, np.array([[0.0]]))
    return float(eval_F(state, "train")[0, 0])


def test_euler_error_is_first_order(one_sample_dataset, hand_oracle):
    # tiempo total fijo μ·T = 0.01; ġ = −JF, J̇ = −gF, Ḟ = −(g² + J²)F
    coarse, medium, fine = (_euler_final_F(one_sample_dataset, hand_oracle, 1e-3 / 2 ** k, 10 * 2 ** k)
                            for k in range(3))
    assert medium != fine
    assert 1.5 <= (coarse - medium) / (medium - fine) <= 2.5


# ============================================================================
# Kernels lineales frente a la red en espacio de parámetros
# ============================================================================

class TestLinearParameterSpace:

    @pytest.fixture
    def linear_data(self):
        rng = np.random.default_rng(21)
        train_x = rng.standard_normal((10, 4))
        test_x = rng.standard_normal((3, 4))
        projection = rng.standard_normal((2, 4))
        return Dataset(train_x, gen_projection_labels(train_x, 2, projection=projection),
                       test_x, gen_projection_labels(test_x, 2, projection=projection),
                       "lineal", "none", "regression")

    def test_build_kernels_counts_weight_matrices(self):
        xi = np.array([[1.0, -2.0, 0.5, 1.0]])
        x = np.array([[0.3, 1.0, -1.0]])
        for depth_g in (1, 2):
            config = TrainConfig(lr=0.1, bottleneck_dim=3, activation="linear", depth_g=depth_g)
            kernels = build_kernels(config, 4)
            np.testing.assert_allclose(kernels.theta(xi, xi), [[(depth_g + 1) * 6.25 / 4]])
            np.testing.assert_allclose(kernels.k(x, x), [[2 * 2.09 / 3]])

    def test_function_space_matches_wide_linear_net(self, linear_data):
        lr, width = 1e-2, 5000
        oracle = init_wide_net((4, 3, 2), depth_g=1, activation="linear", width=width, seed=1)
        kernels = BottleneckKernels.linear(4, 3, depth_f=2, depth_g=2)
        state = init_function_state(linear_data, oracle, kernels, lr, output_anchor="moving")
        net = BottleneckMlp(MlpSpec.four_layer(4, width, 3, 2, "linear", seed=1),
                            list(oracle.g_layers), [oracle.f_u, oracle.f_v])
        batch = np.arange(len(linear_data.train_x))

        np.testing.assert_allclose(eval_F(state, "train"), forward(net, linear_data.train_x)[1],
                                   rtol=1e-6, atol=1e-9)
        deviations, losses = [], []
        for _ in range(100):
            sgd_step(state, batch, linear_data.train_y)
            sgd_update(net, linear_data.train_x, linear_data.train_y, lr, full_batch=True)
            F_net = forward(net, linear_data.train_x)[1]
            deviations.append(np.linalg.norm(eval_F(state, "train") - F_net) / np.linalg.norm(F_net))
            losses.append(0.5 * float(np.sum((F_net - linear_data.train_y) ** 2)))

        assert max(deviations) <= 0.02
        assert losses[-1] < 0.8 * 0.5 * float(np.sum((state.F0_train - linear_data.train_y) ** 2))


# ============================================================================
# Aceleración frente a la línea base
# ============================================================================

@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_narrow_bottleneck_trains_faster(seed):
    dataset = gen_synthetic_gp(n_train=500, n_test=20, seed=seed)
    final_loss = {}
    for width in (10, 100, None):
        config = TrainConfig(lr=2000.0, batch_size=20, steps=1000, eval_every=1000,
                             bottleneck_dim=width, loss_scale=2.5e-5, seed=seed)
        final_loss[width] = run_training(config, dataset, workers=4)[-1].train_loss
    assert final_loss[10] < final_loss[100] < final_loss[None]
