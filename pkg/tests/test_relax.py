import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeqprop import CouplingSpec, CurvatureError, DomainError, HopfieldModel, LinRegModel, NumericError, init_params
from aeqprop.core import EnergyModel, Layout, Segment
from aeqprop.relax import (
    CoordConfig,
    GradFlowConfig,
    ThresholdState,
    critical_damping_matrix,
    homeostatic_control_analytic,
    quadratic_box_min,
    relax_coordinate,
    relax_gradflow,
    update_threshold,
)
from aeqprop.verify import descent_oracle


class NullModel(EnergyModel):
    """E = 0 and C = 0: only the coupling acts."""

    def __init__(self, n_params=3):
        self.param_layout = Layout([Segment("w", (n_params,))])

    def state_layout(self, x):
        return Layout([Segment("s", (len(x), 1), -1.0, 1.0)])

    def energy(self, theta, x, s):
        return 0.0

    def cost(self, s, y):
        return 0.0

    def grad_s_energy(self, theta, x, s):
        return np.zeros_like(s)

    def grad_theta_energy(self, theta, x, s):
        return np.zeros_like(theta)

    def grad_s_cost(self, s, y):
        return np.zeros_like(s)


class TestQuadraticBoxMin:
    def test_unconstrained(self):
        assert quadratic_box_min(1.0, -2.0, -math.inf, math.inf) == 1.0

    def test_clamped_to_lower(self):
        assert quadratic_box_min(0.5, 2.0, 0.0, 1.0) == 0.0

    def test_flat_slice_moves_to_bound(self):
        assert quadratic_box_min(0.0, 1.0, -2.0, 3.0) == -2.0
        with pytest.raises(CurvatureError):
            quadratic_box_min(0.0, 1.0, -math.inf, 3.0)

    def test_negative_curvature(self):
        with pytest.raises(CurvatureError):
            quadratic_box_min(-1.0, 0.0, 0.0, 1.0)

    @settings(max_examples=30, deadline=None)
    @given(a=st.floats(0.01, 10), b=st.floats(-10, 10), p=st.floats(-5, 5), w=st.floats(0.01, 5))
    def test_grid_scan_oracle(self, a, b, p, w):
        q = p + w
        grid = np.linspace(p, q, 1_000_001)
        best = grid[np.argmin(a * grid ** 2 + b * grid)]
        assert abs(quadratic_box_min(a, b, p, q) - best) <= (q - p) / 1e6 + 1e-12


class TestRelaxCoordinate:
    def test_zero_params_projects_zero(self):
        m = HopfieldModel.dense([3, 4, 2])
        x = np.ones((2, 3))
        start = np.random.default_rng(0).uniform(0, 1, m.state_layout(x).size)
        out = relax_coordinate(m, np.zeros(m.param_layout.size), x, np.zeros((2, 2)), 0.0,
                               CoordConfig(threshold=1e-12), state=start)
        np.testing.assert_array_equal(out.state, 0.0)
        assert out.iterations == 2  # the second sweep confirms nothing moves

    def test_linreg_one_sweep(self):
        m = LinRegModel()
        theta = np.random.default_rng(1).standard_normal(m.param_layout.size)
        x, y = np.array([0.3]), np.array([0.2])
        out = relax_coordinate(m, theta, x, y, 0.0, CoordConfig(max_iters=1))
        np.testing.assert_allclose(out.state, m.prediction(theta, x), rtol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_descent_oracle(self, seed):
        m = HopfieldModel.dense([2, 3, 2])
        rng = np.random.default_rng(seed)
        theta = init_params(m, [1.0, 1.0], seed) + 0.1 * rng.standard_normal(m.param_layout.size)
        x, y = rng.uniform(0, 1, (1, 2)), np.eye(2)[[seed % 2]]
        out = relax_coordinate(m, theta, x, y, 0.3, CoordConfig(max_iters=100_000, threshold=1e-14,
                                                                check_monotone=True))
        z, residual = descent_oracle(m, theta, x, y, 0.3, tol=1e-10)
        assert residual < 1e-10
        np.testing.assert_allclose(out.state, z, atol=1e-6)

    def test_monotone_history(self):
        m = HopfieldModel.dense([4, 5, 3])
        rng = np.random.default_rng(2)
        theta = init_params(m, [1.0, 1.0], 2)
        x, y = rng.uniform(0, 1, (3, 4)), np.eye(3)[[0, 1, 2]]
        out = relax_coordinate(m, theta, x, y, 0.5, CoordConfig(check_monotone=True, threshold=1e-10))
        h = np.array(out.history)
        assert np.all(np.diff(h) <= 1e-14 * np.maximum(1.0, np.abs(h[1:])))

    def test_unbounded_pessimistic_linreg(self):
        m = LinRegModel()
        with pytest.raises(CurvatureError):
            relax_coordinate(m, np.zeros(m.param_layout.size), np.array([0.1]), np.array([1.0]), -1.5)

    def test_float_params_needs_control(self):
        m = LinRegModel()
        with pytest.raises(DomainError):
            relax_coordinate(m, np.zeros(m.param_layout.size), np.array([0.1]), np.array([1.0]), 0.0,
                             float_params=True)

    def test_after_state_schedule_is_single_param_update(self):
        # with theta relaxed once after the state settles, the update is -eps * dE/dtheta(s_beta) + eps * dE/dtheta(s_0)
        m = HopfieldModel.dense([3, 4, 2])
        rng = np.random.default_rng(3)
        theta = init_params(m, [1.0, 1.0], 3)
        x, y = rng.uniform(0, 1, (2, 3)), np.eye(2)[[0, 1]]
        c = CouplingSpec.quadratic(0.2, m.param_layout)
        cfg = CoordConfig(threshold=1e-12, max_iters=1000, param_schedule="after_state")
        free = relax_coordinate(m, theta, x, y, 0.0, cfg)
        u = theta + 0.2 * m.grad_theta_energy(theta, x, free.state)
        out = relax_coordinate(m, theta, x, y, 0.5, cfg, state=free.state, control=u, coupling=c, float_params=True)
        nudged = relax_coordinate(m, theta, x, y, 0.5, cfg, state=free.state)
        expected = theta - 0.2 * (m.grad_theta_energy(theta, x, nudged.state)
                                  - m.grad_theta_energy(theta, x, free.state))
        np.testing.assert_allclose(out.params, expected, atol=1e-10)


class TestRelaxGradflow:
    def test_clamped_toy_converges_without_oscillation(self):
        m = NullModel()
        c = CouplingSpec.quadratic(0.1, m.param_layout)
        theta0 = np.array([1.0, -2.0, 0.5])
        u = np.zeros(3)
        theta, gaps = theta0, []
        for _ in range(40):
            theta = relax_gradflow(m, theta, np.zeros(1), np.zeros(1), 0.0, GradFlowConfig(n_steps=1),
                                   mode="clamped_u", control=u, coupling=c).params
            gaps.append(theta - u)
        gaps = np.array(gaps)
        assert np.linalg.norm(gaps[-1]) < 1e-6 * np.linalg.norm(theta0)
        # geometric approach from one side: the offset never changes sign and never grows
        assert np.all(gaps * theta0 >= 0)
        assert np.all(np.diff(np.abs(gaps), axis=0) <= 0)

    def test_homeostatic_toy_holds_theta(self):
        m = NullModel()
        eps = 0.1
        c = CouplingSpec.quadratic(eps, m.param_layout)
        target = np.array([0.3, -0.4, 1.0])
        theta0 = target + np.array([0.5, 0.5, -0.5])
        traj = []
        theta, u = theta0, theta0.copy()
        for _ in range(60):
            out = relax_gradflow(m, theta, np.zeros(1), np.zeros(1), 0.0, GradFlowConfig(n_steps=1), mode="homeostatic",
                                 control=u, coupling=c, target=target, rng=np.random.default_rng(0))
            theta, u = out.params, out.control
            traj.append(theta - target)
        traj = np.array(traj)
        assert np.linalg.norm(traj[-1]) < 1e-3 * np.linalg.norm(theta0 - target)
        # no sign-alternating oscillation of the successive moves
        moves = np.diff(np.vstack([theta0 - target, traj]), axis=0)
        flips = np.sum(np.sign(moves[1:]) * np.sign(moves[:-1]) < 0, axis=0)
        assert np.all(flips <= 1)

    def test_critical_damping_eigenvalues(self):
        eps = 0.05
        ev = np.linalg.eigvals(critical_damping_matrix(eps))
        np.testing.assert_allclose(ev, [-1 / (2 * eps)] * 2, rtol=1e-6)

    def test_accepted_steps_decrease_energy(self):
        m = HopfieldModel.dense([3, 4, 2])
        rng = np.random.default_rng(0)
        theta = init_params(m, [1.0, 1.0], 0)
        x, y = rng.uniform(0, 1, (2, 3)), np.eye(2)[[0, 1]]
        cfg = GradFlowConfig(n_steps=100)
        out = relax_gradflow(m, theta, x, y, 0.0, cfg)
        # ties (|change| <= tie_tol) may be kept, so only rounding-level rises are allowed
        assert np.all(np.diff(out.history) <= cfg.tie_tol)
        assert out.history[-1] < out.history[0]

    def test_linreg_closed_form(self):
        m = LinRegModel()
        theta = np.random.default_rng(5).standard_normal(m.param_layout.size) / 4
        x, y = np.array([0.6]), np.array([0.0])
        out = relax_gradflow(m, theta, x, y, 0.0, GradFlowConfig(n_steps=50))
        assert abs(out.state[0] - m.prediction(theta, x)[0]) < 1e-3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_flagged(self):
        m = LinRegModel()
        with pytest.raises(NumericError):
            relax_gradflow(m, np.zeros(m.param_layout.size), np.array([0.1]), np.array([1.0]), -1.5,
                           GradFlowConfig(n_steps=2000))


class TestHomeostasis:
    def test_zero_gradient_keeps_control(self):
        m = LinRegModel()
        theta = np.zeros(m.param_layout.size)
        theta[0] = 1.0
        c = CouplingSpec.quadratic(0.3, m.param_layout)
        u = homeostatic_control_analytic(m, theta, np.array([0.0]), np.array([5.0]), 0.0, c)
        np.testing.assert_allclose(u, theta, atol=1e-15)

    @pytest.mark.parametrize("beta", [0.0, 0.2, -0.2])
    def test_floating_relaxation_stays_put(self, beta):
        m = LinRegModel()
        rng = np.random.default_rng(7)
        theta = rng.standard_normal(m.param_layout.size) / 4
        x, y = np.array([0.45]), np.array([0.8])
        c = CouplingSpec.quadratic(0.1, m.param_layout)
        cfg = CoordConfig(threshold=1e-13, max_iters=1000)
        u = homeostatic_control_analytic(m, theta, x, y, beta, c, cfg)
        out = relax_coordinate(m, theta, x, y, beta, cfg, control=u, coupling=c, float_params=True)
        assert np.linalg.norm(out.params - theta) < 1e-8


class TestThreshold:
    def test_huge_gap_keeps_xi(self):
        assert update_threshold(ThresholdState(1e-3), 1e6).xi == 1e-3

    def test_zero_gap_hits_floor(self):
        assert update_threshold(ThresholdState(1e-3), 0.0).xi == 1e-12

    def test_arithmetic(self):
        assert update_threshold(ThresholdState(1e-3, 0.01), 0.05).xi == pytest.approx(5e-4)
