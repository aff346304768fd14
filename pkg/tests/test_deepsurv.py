import json

import numpy as np
import pytest

from conftest import ph_dataset
from oracles import central_difference
from survens.deepsurv import (
    DeepSurvModel,
    MlpConfig,
    fit_deepsurv,
    forward,
    init_params,
    loss_and_grads,
    risk_score_ds,
)
from survens.errors import DivergedLoss, NoEvents, ValidationError
from survens.partial_likelihood import cox_nll


class TestForward:
    def test_zero_weights_give_zero(self, rng):
        cfg = MlpConfig(layer_widths=[3, 2])
        params = [np.zeros_like(p) for p in init_params(4, cfg)]
        f, _ = forward(params, rng.normal(size=(5, 4)), cfg.activation)
        np.testing.assert_array_equal(f, 0.0)

    def test_hand_computed_relu_net(self):
        w1 = np.array([[1.0, -1.0], [2.0, 0.5]])
        b1 = np.array([0.0, 1.0])
        w2 = np.array([[3.0], [-2.0]])
        x = np.array([[1.0, 1.0], [-1.0, 0.0]])
        f, _ = forward([w1, b1, w2], x, MlpConfig().activation)
        # row 1: z = (3, 0.5) -> 3*3 - 2*0.5 = 8; row 2: z = (-1, 2) -> relu (0, 2) -> -4
        np.testing.assert_array_equal(f, [8.0, -4.0])

    def test_monotone_with_positive_weights(self, rng):
        cfg = MlpConfig(layer_widths=[4, 3])
        params = [np.abs(p) + 0.1 for p in init_params(2, cfg)]
        x = np.column_stack([np.linspace(-2, 2, 30), np.zeros(30)])
        f, _ = forward(params, x, cfg.activation)
        assert np.all(np.diff(f) >= 0)

    def test_eval_has_no_dropout(self, rng):
        ds, _ = ph_dataset(60, [1.0, 0.5], seed=1)
        model = fit_deepsurv(ds, MlpConfig(layer_widths=[4], dropout=0.5, epochs=3))
        np.testing.assert_array_equal(model.risk_score(ds.x), risk_score_ds(model, ds.x))


class TestGradients:
    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_backprop_matches_finite_difference(self, activation):
        ds, _ = ph_dataset(40, [1.0, -0.5, 0.3], seed=2)
        cfg = MlpConfig(layer_widths=[5, 3], activation=activation, weight_init_seed=3)
        params = init_params(ds.p, cfg)
        _, grads = loss_and_grads(params, ds.x, ds.time, ds.event, cfg.activation)
        for k, p in enumerate(params):
            def loss_of(value, k=k):
                trial = list(params)
                trial[k] = value
                return loss_and_grads(trial, ds.x, ds.time, ds.event, cfg.activation)[0]
            fd = central_difference(loss_of, p.copy())
            np.testing.assert_allclose(grads[k], fd, atol=1e-6)


class TestTraining:
    def test_linear_net_recovers_direction(self):
        beta = np.array([1.0, -0.5, 0.5])
        ds, _ = ph_dataset(2000, beta, seed=4)
        cfg = MlpConfig(layer_widths=[], dropout=0.0, learning_rate=0.05, epochs=400)
        w = fit_deepsurv(ds, cfg).params[-1][:, 0]
        cos = w @ beta / (np.linalg.norm(w) * np.linalg.norm(beta))
        assert np.degrees(np.arccos(min(cos, 1.0))) < 10

    def test_zero_epochs_is_initialisation(self):
        ds, _ = ph_dataset(50, [1.0, 0.5], seed=5)
        cfg = MlpConfig(layer_widths=[4], epochs=0, weight_init_seed=7)
        model = fit_deepsurv(ds, cfg)
        for a, b in zip(model.params, init_params(ds.p, cfg)):
            np.testing.assert_array_equal(a, b)
        assert model.train_loss_trace == []

    def test_loss_trace_nonincreasing(self):
        ds, _ = ph_dataset(200, [1.0, -0.5], seed=6)
        cfg = MlpConfig(layer_widths=[8], dropout=0.0, optimizer="sgd", learning_rate=0.01, epochs=100)
        trace = np.array(fit_deepsurv(ds, cfg).train_loss_trace)
        assert np.all(np.diff(trace) <= 1e-6)
        assert trace[-1] < trace[0]

    def test_trace_is_per_event_loss(self):
        ds, _ = ph_dataset(80, [1.0], seed=6)
        cfg = MlpConfig(layer_widths=[3], dropout=0.0, epochs=1, weight_init_seed=2)
        model = fit_deepsurv(ds, cfg)
        f0, _ = forward(init_params(ds.p, cfg), ds.x, cfg.activation)
        assert model.train_loss_trace[0] == pytest.approx(cox_nll(f0, ds.time, ds.event) / ds.event.sum())

    def test_deterministic_under_seed(self):
        ds, _ = ph_dataset(80, [1.0, 0.3], seed=8)
        cfg = MlpConfig(layer_widths=[4], epochs=20, weight_init_seed=3)
        np.testing.assert_array_equal(fit_deepsurv(ds, cfg).risk_score(ds.x), fit_deepsurv(ds, cfg).risk_score(ds.x))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_diverged_loss(self):
        ds, _ = ph_dataset(30, [1.0, 0.5], seed=1)
        cfg = MlpConfig(layer_widths=[], optimizer="sgd", learning_rate=1e308, epochs=5)
        with pytest.raises(DivergedLoss) as info:
            fit_deepsurv(ds, cfg)
        assert isinstance(info.value.trace, list)

    def test_no_events(self):
        ds, _ = ph_dataset(20, [1.0], seed=1)
        ds.event[:] = False
        with pytest.raises(NoEvents):
            fit_deepsurv(ds, MlpConfig(epochs=1))

    def test_config_checks(self):
        with pytest.raises(ValidationError):
            MlpConfig(dropout=1.0)
        with pytest.raises(ValidationError):
            MlpConfig(layer_widths=[0])
        with pytest.raises(ValueError):
            MlpConfig(activation="gelu")

    def test_json_round_trip(self):
        ds, _ = ph_dataset(60, [1.0, 0.5], seed=9)
        model = fit_deepsurv(ds, MlpConfig(layer_widths=[3, 2], activation="tanh", epochs=5))
        back = DeepSurvModel.from_json(json.loads(json.dumps(model.to_json())))
        np.testing.assert_array_equal(back.risk_score(ds.x), model.risk_score(ds.x))
        assert back.config.activation == model.config.activation
        assert back.train_loss_trace == model.train_loss_trace
