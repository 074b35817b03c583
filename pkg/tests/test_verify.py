import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeqprop import CouplingSpec, HopfieldModel, LinRegModel, init_params
from aeqprop.core import EnergyModel, Layout, Segment
from aeqprop.verify import (
    TIGHT,
    BetaGrid,
    SuiteConfig,
    box_qp_global,
    fd_loss_grad,
    free_energy_F,
    loss_value,
    lyapunov_value,
    nudge_scan,
    projected_descent,
    quadratic_form,
    random_instance,
    riemannian_metric,
    theorem_suite,
)


class ZeroModel(EnergyModel):
    """E = 0, C = 0 on a unit box."""

    def __init__(self):
        self.param_layout = Layout([Segment("w", (2,))])

    def state_layout(self, x):
        return Layout([Segment("s", (len(x), 1), 0.0, 1.0)])

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


class NegatedGradLinReg(LinRegModel):
    """Mutant whose state gradient has the wrong sign."""

    def grad_s_energy(self, theta, x, s):
        return -super().grad_s_energy(theta, x, s)


def linreg_case(seed=0):
    m = LinRegModel()
    rng = np.random.default_rng(seed)
    return (m,) + random_instance(m, rng)


def hopfield_case(seed=0):
    m = HopfieldModel.dense([2, 3, 2])
    rng = np.random.default_rng(seed)
    return (m,) + random_instance(m, rng)


class TestOracles:
    def test_quadratic_form_recovers_matrix(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((4, 4))
        Q = A @ A.T
        c = rng.standard_normal(4)
        Qh, ch, f0 = quadratic_form(lambda z: 0.5 * z @ Q @ z + c @ z + 3.0, 4)
        np.testing.assert_allclose(Qh, Q, atol=1e-12)
        np.testing.assert_allclose(ch, c, atol=1e-12)
        assert f0 == 3.0

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_box_qp_matches_projected_descent(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.standard_normal((4, 4))
        Q = A @ A.T + 0.5 * np.eye(4)
        c = rng.standard_normal(4) * 3
        lo, hi = -np.ones(4), np.ones(4)
        z_pd, res = projected_descent(Q, c, lo, hi)
        z_qp, _ = box_qp_global(Q, c, lo, hi)
        np.testing.assert_allclose(z_pd, z_qp, atol=1e-6)

    def test_box_qp_finds_global_of_nonconvex(self):
        Q = np.array([[1.0, 0.0], [0.0, -1.0]])
        z, val = box_qp_global(Q, np.zeros(2), -np.ones(2), np.ones(2))
        grid = np.linspace(-1, 1, 401)
        brute = min(0.5 * (a * a - b * b) for a, b in itertools.product(grid, grid))
        assert val == pytest.approx(brute)
        np.testing.assert_allclose(np.abs(z), [0.0, 1.0])


class TestFdLossGrad:
    def test_constant_cost(self):
        m = ZeroModel()
        np.testing.assert_array_equal(fd_loss_grad(m, np.zeros(2), np.zeros(1), np.zeros(1)), 0.0)

    def test_linreg_closed_form(self):
        m, theta, x, y = linreg_case(1)
        np.testing.assert_allclose(fd_loss_grad(m, theta, x, y, h=1e-5), m.loss_grad(theta, x, y), atol=1e-7)

    def test_second_order_in_h(self):
        m, theta, x, y = hopfield_case(3)
        ref = fd_loss_grad(m, theta, x, y, h=1e-4)
        e1 = np.linalg.norm(fd_loss_grad(m, theta, x, y, h=0.08) - ref)
        e2 = np.linalg.norm(fd_loss_grad(m, theta, x, y, h=0.04) - ref)
        assert 3.0 < e1 / e2 < 5.0


class TestFreeEnergy:
    def test_beta_zero_is_min_energy(self):
        m, theta, x, y = linreg_case(2)
        # free equilibrium s = p gives E = 0 for plain linreg
        assert free_energy_F(m, theta, x, y, 0.0) == pytest.approx(0.0, abs=1e-20)

    def test_linreg_closed_form(self):
        m, theta, x, y = linreg_case(3)
        p = m.prediction(theta, x)
        b = 0.4
        assert free_energy_F(m, theta, x, y, b, TIGHT) == pytest.approx(b / (1 + b) * 0.5 * float((p - y) @ (p - y)))

    @pytest.mark.parametrize("case", [linreg_case, hopfield_case])
    def test_concave_and_derivative(self, case):
        m, theta, x, y = case(4)
        betas = np.linspace(-0.4, 0.4, 9)
        F = np.array([free_energy_F(m, theta, x, y, b, TIGHT) for b in betas])
        assert np.diff(F, 2).max() <= 1e-8
        h = 1e-4
        for b in (-0.2, 0.1):
            dF = (free_energy_F(m, theta, x, y, b + h, TIGHT) - free_energy_F(m, theta, x, y, b - h, TIGHT)) / (2 * h)
            scan = nudge_scan(m, theta, x, y, BetaGrid(np.array([b])), TIGHT)
            assert dF == pytest.approx(scan.cost[0], rel=1e-3)


class TestLyapunov:
    def test_constant_cost(self):
        v = lyapunov_value(ZeroModel(), np.zeros(2), np.zeros(1), np.zeros(1), 0.0, 0.5)
        assert v.value == 0.0

    def test_single_point_grid(self):
        m, theta, x, y = linreg_case(5)
        v = lyapunov_value(m, theta, x, y, 0.2, 0.2, coord=TIGHT)
        p = m.prediction(theta, x)
        s = (p + 0.2 * y) / 1.2
        assert v.value == pytest.approx(m.cost(s, y), rel=1e-12)

    def test_matches_closed_form(self):
        # L_{b1;b2} = (F(b2) - F(b1)) / (b2 - b1) with F(b) = b/(1+b) (p-y)^2/2
        m, theta, x, y = linreg_case(6)
        d2 = 0.5 * float(np.sum((m.prediction(theta, x) - y) ** 2))
        F = lambda b: b / (1 + b) * d2
        v = lyapunov_value(m, theta, x, y, -0.3, 0.2, coord=TIGHT)
        exact = (F(0.2) - F(-0.3)) / 0.5
        assert v.f_difference == pytest.approx(exact, rel=1e-10)
        assert abs(v.integral - exact) <= v.tolerance
        assert v.consistent

    @pytest.mark.parametrize("seed", range(10))
    def test_bounds_on_loss(self, seed):
        m, theta, x, y = linreg_case(seed)
        c0 = loss_value(m, theta, x, y, coord=TIGHT)
        lower = lyapunov_value(m, theta, x, y, 0.0, 0.5, coord=TIGHT).f_difference
        upper = lyapunov_value(m, theta, x, y, -0.5, 0.0, coord=TIGHT).f_difference
        assert lower - 1e-8 <= c0 <= upper + 1e-8


class TestMetric:
    def test_small_epsilon_is_identity(self):
        m, theta, x, y = linreg_case(7)
        eps = 1e-5
        est = riemannian_metric(m, theta, x, y, 0.0, CouplingSpec.quadratic(eps, m.param_layout), coord=TIGHT)
        np.testing.assert_allclose(est.metric, np.eye(m.param_layout.size), atol=1e-3)
        assert est.positive_definite

    def test_per_component_coupling_hessian(self):
        m = ZeroModel()
        eps = np.array([0.1, 0.4])
        est = riemannian_metric(m, np.zeros(2), np.zeros(1), np.zeros(1), 0.0, CouplingSpec.quadratic(eps))
        np.testing.assert_allclose(est.hessian, np.diag(1 / eps), rtol=1e-10)
        np.testing.assert_allclose(est.metric, np.eye(2), atol=1e-12)


class TestSuite:
    def test_linreg_defaults_pass(self):
        report = theorem_suite(LinRegModel())
        assert report.passed, report.to_json()
        assert report.status == 0

    def test_all_zero_model_vacuous(self):
        m = ZeroModel()
        inst = [(np.zeros(2), np.zeros(1), np.zeros(1))]
        report = theorem_suite(m, instances=inst)
        assert report.passed, report.to_json()
        assert report.check("sgd_equivalence").vacuous

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_mutation_detected(self):
        report = theorem_suite(NegatedGradLinReg(), SuiteConfig(n_instances=3))
        assert not report.check("sgd_equivalence").passed
        assert not report.passed

    def test_report_json(self):
        import json

        report = theorem_suite(LinRegModel(), SuiteConfig(n_instances=2))
        d = json.loads(report.to_json())
        assert {c["status"] for c in d["checks"]} == {"pass"}
