import numpy as np
import pytest

from aeqprop import HopfieldModel, LinRegModel, NudgeVariant, init_params
from aeqprop.data import RegressionStream
from aeqprop.relax import CoordConfig, GradFlowConfig
from aeqprop.train import (
    AeqpropConfig,
    aeqprop_step,
    eqprop_estimator,
    error_rate,
    sgd_baseline,
    train,
)
from aeqprop.verify import TIGHT, fd_loss_grad


def smooth(v, w=50):
    return np.convolve(v, np.ones(w) / w, mode="valid")


@pytest.fixture
def linreg():
    return LinRegModel()


@pytest.fixture
def stream():
    return RegressionStream.from_seed(0, 0).sample(1000)


class TestStep:
    def test_exact_fit_does_not_move(self, linreg):
        theta = np.random.default_rng(0).standard_normal(linreg.param_layout.size) / 4
        x = np.array([0.35])
        y = linreg.prediction(theta, x)
        cfg = AeqpropConfig(NudgeVariant.centered(0.2), epsilon=0.1, coord=TIGHT)
        new, rec = aeqprop_step(linreg, theta, x, y, cfg)
        np.testing.assert_allclose(new, theta, atol=1e-12)
        assert rec.loss == pytest.approx(0.0, abs=1e-24)

    def test_sgd_equivalence_small_eps_beta(self, linreg):
        # relative error is about beta + |phi|^2 eps beta here, so kappa = 1 covers it
        kappa = 1.0
        rng = np.random.default_rng(1)
        eps = beta = 1e-3
        for _ in range(3):
            theta = rng.standard_normal(linreg.param_layout.size) / 4
            x, y = rng.uniform(-1, 1, 1), rng.uniform(-1, 1, 1)
            cfg = AeqpropConfig(NudgeVariant.optimistic(beta), epsilon=eps, coord=TIGHT)
            new, _ = aeqprop_step(linreg, theta, x, y, cfg)
            g = fd_loss_grad(linreg, theta, x, y)
            err = np.linalg.norm((theta - new) / (eps * beta) - g) / np.linalg.norm(g)
            assert err < 2 * (eps + beta) * kappa

    def test_pessimistic_without_stabilizer_diverges(self, linreg):
        theta = np.zeros(linreg.param_layout.size)
        cfg = AeqpropConfig(NudgeVariant.pessimistic(1.5), epsilon=0.1)
        new, rec = aeqprop_step(linreg, theta, np.array([0.2]), np.array([1.0]), cfg)
        assert rec.diverged
        np.testing.assert_array_equal(new, theta)

    def test_pessimistic_with_stabilizer_is_fine(self):
        m = LinRegModel(regularize_state=True)
        cfg = AeqpropConfig(NudgeVariant.pessimistic(1.5), epsilon=0.1)
        _, rec = aeqprop_step(m, np.zeros(m.param_layout.size), np.array([0.2]), np.array([1.0]), cfg)
        assert not rec.diverged

    def test_controller_matches_analytic(self, linreg):
        rng = np.random.default_rng(2)
        theta = rng.standard_normal(linreg.param_layout.size) / 4
        x, y = np.array([0.1]), np.array([0.7])
        analytic = AeqpropConfig(NudgeVariant.optimistic(0.1), epsilon=0.05, coord=TIGHT)
        ctrl = AeqpropConfig(NudgeVariant.optimistic(0.1), epsilon=0.05, homeostatic_mode="controller",
                             relaxer="gradflow", gradflow=GradFlowConfig(n_steps=400))
        a, _ = aeqprop_step(linreg, theta, x, y, analytic)
        c, rec = aeqprop_step(linreg, theta, x, y, ctrl)
        assert np.linalg.norm((c - theta) - (a - theta)) < 0.05 * np.linalg.norm(a - theta)
        assert rec.controller_residual < 1e-3

    def test_lyapunov_recorded(self, linreg):
        cfg = AeqpropConfig(NudgeVariant.centered(0.1), epsilon=0.1, verify_lyapunov=True, coord=TIGHT)
        _, rec = aeqprop_step(linreg, np.zeros(linreg.param_layout.size), np.array([0.3]), np.array([0.5]), cfg)
        assert rec.lyapunov_after <= rec.lyapunov + rec.lyapunov_tolerance
        assert not rec.lyapunov_violation


class TestTrain:
    def test_zero_epochs(self, linreg, stream):
        theta0 = np.ones(linreg.param_layout.size)
        tr = train(linreg, stream, AeqpropConfig(NudgeVariant.optimistic(0.1)), 0, theta0)
        assert tr.steps == [] and tr.epochs == []
        np.testing.assert_array_equal(tr.theta, theta0)

    def test_tracks_sgd(self, linreg, stream):
        theta0 = np.zeros(linreg.param_layout.size)
        a = train(linreg, stream, AeqpropConfig(NudgeVariant.optimistic(0.01), epsilon=0.01), 1, theta0, shuffle=False)
        s = sgd_baseline(linreg, stream, 0.01 * 0.01, 1, theta0, shuffle=False)
        ratio = smooth(a.losses())[-1] / smooth(s.losses())[-1]
        assert 0.8 <= ratio <= 1.25

    def test_bit_identical_rerun(self, linreg, stream):
        cfg = AeqpropConfig(NudgeVariant.centered(0.1), epsilon=0.1, seed=3)
        data = (stream[0][:200], stream[1][:200])
        a = train(linreg, data, cfg, 2, np.zeros(linreg.param_layout.size))
        b = train(linreg, data, cfg, 2, np.zeros(linreg.param_layout.size))
        np.testing.assert_array_equal(a.losses(), b.losses())
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_lr_decay_scales_epsilon(self, linreg, stream):
        data = (stream[0][:20], stream[1][:20])
        tr = train(linreg, data, AeqpropConfig(NudgeVariant.optimistic(0.1), epsilon=0.1, lr_decay=0.5), 3,
                   np.zeros(linreg.param_layout.size))
        assert [e.epsilon_scale for e in tr.epochs] == [1.0, 0.5, 0.25]

    def test_adaptive_threshold_shrinks(self):
        m = HopfieldModel.dense([4, 6, 3])
        rng = np.random.default_rng(0)
        x, y = rng.uniform(0, 1, (24, 4)), np.eye(3)[rng.integers(0, 3, 24)]
        cfg = AeqpropConfig(NudgeVariant.centered(0.5), epsilon=0.2, adaptive_threshold=True,
                            coord=CoordConfig(param_schedule="after_state"))
        tr = train(m, (x, y), cfg, 3, init_params(m, [1.0, 1.0], 0), batch_size=8)
        xis = [e.xi for e in tr.epochs]
        assert xis[0] == 1e-3
        assert all(b <= a for a, b in zip(xis, xis[1:]))

    def test_divergent_run_stops(self, linreg, stream):
        tr = train(linreg, stream, AeqpropConfig(NudgeVariant.pessimistic(1.5), epsilon=0.1), 1,
                   np.zeros(linreg.param_layout.size))
        assert tr.diverged and len(tr.steps) == 1


class TestSGD:
    def test_zero_gradient(self, linreg):
        theta = np.zeros(linreg.param_layout.size)
        x = np.linspace(-1, 1, 10)
        tr = sgd_baseline(linreg, (x, np.zeros(10)), 0.5, 1, theta)
        np.testing.assert_array_equal(tr.theta, theta)

    def test_zero_lr(self, linreg, stream):
        theta = np.ones(linreg.param_layout.size)
        tr = sgd_baseline(linreg, (stream[0][:50], stream[1][:50]), 0.0, 1, theta)
        np.testing.assert_array_equal(tr.theta, theta)
        assert len(tr.steps) == 50

    def test_closed_form_gradient(self, linreg):
        theta = np.random.default_rng(4).standard_normal(linreg.param_layout.size) / 3
        x, y = np.array([-0.6]), np.array([0.25])
        np.testing.assert_allclose(linreg.loss_grad(theta, x, y), fd_loss_grad(linreg, theta, x, y), atol=1e-8)

    def test_divergence(self, linreg, stream):
        tr = sgd_baseline(linreg, stream, 0.25, 1, np.zeros(linreg.param_layout.size), shuffle=False)
        assert tr.diverged


class TestEqpropEstimator:
    def test_small_beta_matches_gradient(self, linreg):
        theta = np.random.default_rng(5).standard_normal(linreg.param_layout.size) / 3
        x, y = np.array([0.8]), np.array([-0.4])
        est = eqprop_estimator(linreg, theta, x, y, 1e-4, TIGHT)
        g = fd_loss_grad(linreg, theta, x, y)
        assert np.linalg.norm(est - g) < 1e-2 * np.linalg.norm(g)

    def test_equals_lyapunov_gradient(self, linreg):
        # L_{0;b} = (p - y)^2 / (2 (1 + b)) in closed form
        beta = 0.3
        theta = np.random.default_rng(6).standard_normal(linreg.param_layout.size) / 3
        x, y = np.array([0.1]), np.array([0.9])
        phi = linreg.features(x)[0]
        expected = (phi @ theta - y[0]) * phi / (1 + beta)
        np.testing.assert_allclose(eqprop_estimator(linreg, theta, x, y, beta, TIGHT), expected, rtol=1e-6)

    def test_cost_insensitive_gives_zero(self, linreg):
        theta = np.zeros(linreg.param_layout.size)
        theta[0] = 0.5
        est = eqprop_estimator(linreg, theta, np.array([0.0]), np.array([0.5]), 0.2, TIGHT)
        np.testing.assert_allclose(est, 0.0, atol=1e-15)


def test_error_rate_perfect_and_wrong():
    m = HopfieldModel.dense([2, 2])
    lay = m.param_layout
    theta = lay.join({"w1": np.eye(2), "b1": np.zeros(2)})
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert error_rate(m, theta, x, np.eye(2)) == 0.0
    assert error_rate(m, theta, x, np.eye(2)[::-1]) == 1.0
