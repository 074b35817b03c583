"""Independent oracles and numerical checks of the learning-rule guarantees.

The oracles here avoid the hand-written state gradients the engines use:
:func:`probe_relax` minimizes the energy from energy values alone, so a
corrupted gradient evaluator cannot fool the finite-difference loss gradient.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (
    CouplingSpec,
    DomainError,
    EnergyModel,
    NudgeVariant,
    NumericError,
    state_energy,
)
from .models import HopfieldModel, LinRegModel, init_params, sample_target, target_eval
from .relax import CoordConfig, GradFlowConfig, relax_state

#: tight settings for verification runs, where relaxation error must sit far below every tolerance
TIGHT = CoordConfig(max_iters=100_000, threshold=1e-13)


# Energy-only relaxation ------------------------------------------------------------


def probe_relax(model: EnergyModel, theta, x, y, beta: float, state=None, max_sweeps: int = 10_000,
                tol: float = 1e-14, delta: float = 0.5) -> np.ndarray:
    """Coordinate minimization driven by energy values only.

    Each scalar is moved to the vertex of the parabola through three energy
    probes, clipped to its box. This is exact for quadratic slices and does
    not touch any gradient evaluator.
    """
    layout = model.state_layout(x)
    s = layout.clip(np.array(state, dtype=float)) if state is not None else model.init_state(x)
    lo, hi = layout.lower_bounds(), layout.upper_bounds()
    f = lambda v: state_energy(model, theta, x, y, v, beta)
    f0 = f(s)
    for _ in range(max_sweeps):
        biggest = 0.0
        for i in range(s.size):
            z = s[i]
            s[i] = z + delta
            fp = f(s)
            s[i] = z - delta
            fm = f(s)
            a = (fp + fm - 2.0 * f0) / (2.0 * delta * delta)
            slope = (fp - fm) / (2.0 * delta)
            if a > 0:
                new = z - slope / (2.0 * a)
            elif a > -1e-12 * max(1.0, abs(f0)):
                new = -np.inf if slope > 0 else (np.inf if slope < 0 else z)
            else:
                raise NumericError(f"probe relaxation met a concave slice at index {i}")
            new = min(max(new, lo[i]), hi[i])
            if not math.isfinite(new):
                raise NumericError(f"energy unbounded below along index {i}")
            s[i] = new
            fn = f(s)
            if fn > f0:  # rounding made the vertex worse than staying put
                s[i] = z
                continue
            biggest = max(biggest, abs(new - z))
            f0 = fn
        if biggest < tol:
            break
    return s


def quadratic_form(fn, n: int, center=None, delta: float = 1.0) -> tuple[np.ndarray, np.ndarray, float]:
    """Recover (Q, c, f0) with fn(center + d) = f0 + c.d + d.Q.d / 2 from energy probes.

    Exact (up to rounding) when ``fn`` is quadratic.
    """
    center = np.zeros(n) if center is None else np.asarray(center, dtype=float)
    f0 = fn(center)
    eye = np.eye(n) * delta
    fp = np.array([fn(center + e) for e in eye])
    fm = np.array([fn(center - e) for e in eye])
    c = (fp - fm) / (2 * delta)
    Q = np.diag((fp + fm - 2 * f0) / delta ** 2)
    for i in range(n):
        for j in range(i + 1, n):
            fij = fn(center + eye[i] + eye[j])
            Q[i, j] = Q[j, i] = (fij - fp[i] - fp[j] + f0) / delta ** 2
    return Q, c, f0


def projected_descent(Q: np.ndarray, c: np.ndarray, lo, hi, start=None, tol: float = 1e-12,
                      max_iters: int = 1_000_000) -> tuple[np.ndarray, float]:
    """Projected gradient descent on d.Q.d/2 + c.d over a box, step 1/lambda_max.

    Returns the point and the final step length (the residual).
    """
    lam = float(np.linalg.eigvalsh(Q).max())
    if lam <= 0:
        raise NumericError("quadratic form has no positive curvature")
    step = 1.0 / lam
    z = np.clip(np.zeros(len(c)) if start is None else np.array(start, dtype=float), lo, hi)
    residual = math.inf
    for _ in range(max_iters):
        new = np.clip(z - step * (Q @ z + c), lo, hi)
        residual = float(np.abs(new - z).max())
        z = new
        if residual < tol:
            break
    return z, residual


def descent_oracle(model: EnergyModel, theta, x, y, beta: float, tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Minimize E + beta C over the state box by long projected gradient descent.

    The quadratic form is read off energy probes, so this path is independent
    of the model's gradient and curvature evaluators.
    """
    layout = model.state_layout(x)
    f = lambda v: state_energy(model, theta, x, y, v, beta)
    Q, c, _ = quadratic_form(f, layout.size)
    return projected_descent(Q, c, layout.lower_bounds(), layout.upper_bounds(), tol=tol)


# Loss, free energy and Lyapunov function -------------------------------------------------


def _relax(model, theta, x, y, beta, relax="engine", coord=None, gradflow=None, state=None):
    if relax == "probe":
        return probe_relax(model, theta, x, y, beta, state=state)
    if relax == "engine":
        return relax_state(model, theta, x, y, beta, coord or TIGHT, gradflow, state=state).state
    raise DomainError(f"unknown relaxation {relax!r}")


def loss_value(model: EnergyModel, theta, x, y, relax: str = "engine", coord=None) -> float:
    """C(s_0(theta, x), y)."""
    return model.cost(_relax(model, theta, x, y, 0.0, relax, coord), y)


def fd_loss_grad(model: EnergyModel, theta, x, y, h: float = 1e-5, relax: str = "probe",
                 coord: CoordConfig | None = None) -> np.ndarray:
    """Central-difference gradient of the loss, re-relaxing the state at every probe."""
    if h <= 0:
        raise DomainError("h must be > 0")
    theta = np.asarray(theta, dtype=float)
    grad = np.empty(theta.size)
    for k in range(theta.size):
        e = np.zeros(theta.size)
        e[k] = h
        grad[k] = (loss_value(model, theta + e, x, y, relax, coord)
                   - loss_value(model, theta - e, x, y, relax, coord)) / (2 * h)
    return grad


def free_energy_F(model: EnergyModel, theta, x, y, beta: float, coord: CoordConfig | None = None,
                  gradflow: GradFlowConfig | None = None, state=None) -> float:
    """min_s E(theta, x, s) + beta C(s, y)."""
    s = _relax(model, theta, x, y, beta, "engine", coord, gradflow, state)
    return state_energy(model, theta, x, y, s, beta)


@dataclass(frozen=True)
class BetaGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size == 0:
            raise DomainError("grid needs at least one point")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise DomainError("grid points must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, beta1: float, beta2: float, n: int = 21) -> "BetaGrid":
        if beta1 == beta2:
            return cls(np.array([beta1]))
        return cls(np.linspace(beta1, beta2, n))

    @property
    def span(self) -> tuple[float, float]:
        return float(self.points[0]), float(self.points[-1])


@dataclass
class NudgeScan:
    """Relaxed quantities along a beta grid."""

    betas: np.ndarray
    cost: np.ndarray       # C(s_beta)
    free_energy: np.ndarray  # F(beta)


def nudge_scan(model: EnergyModel, theta, x, y, grid: BetaGrid, coord: CoordConfig | None = None,
               gradflow: GradFlowConfig | None = None) -> NudgeScan:
    """C(s_beta) and F(beta) along the grid, warm-starting each node from its neighbour.

    Unless the model declares a convex state energy, the grid is swept upward
    and downward and each node keeps the lower-energy equilibrium, so a
    hysteresis branch stuck in a local minimum does not masquerade as F.
    """
    betas = [float(b) for b in grid.points]
    directions = [betas] if model.convex_state else [betas, betas[::-1]]
    best: dict[float, tuple[float, float]] = {}
    for path in directions:
        state = None
        for b in path:
            state = _relax(model, theta, x, y, b, "engine", coord, gradflow, state)
            f = state_energy(model, theta, x, y, state, b)
            if b not in best or f < best[b][1]:
                best[b] = (model.cost(state, y), f)
    return NudgeScan(grid.points, np.array([best[b][0] for b in betas]), np.array([best[b][1] for b in betas]))


def box_qp_global(Q: np.ndarray, c: np.ndarray, lo, hi, max_dim: int = 12) -> tuple[np.ndarray, float]:
    """Global minimizer of d.Q.d/2 + c.d over a box by enumerating active sets.

    Every variable is tried at its lower bound, its upper bound, or free; the
    free block is solved exactly. Exponential in the dimension, so only for
    tiny problems, but exact even when Q is indefinite.
    """
    n = len(c)
    if n > max_dim:
        raise DomainError(f"{n} variables exceed the enumeration limit of {max_dim}")
    lo, hi = np.broadcast_to(lo, n).astype(float), np.broadcast_to(hi, n).astype(float)
    best, best_val = None, math.inf
    for assignment in itertools.product((0, 1, 2), repeat=n):
        a = np.array(assignment)
        if np.any((a == 0) & ~np.isfinite(lo)) or np.any((a == 1) & ~np.isfinite(hi)):
            continue
        z = np.where(a == 0, lo, np.where(a == 1, hi, 0.0))
        free = a == 2
        if free.any():
            Qff = Q[np.ix_(free, free)]
            rhs = -(c[free] + Q[np.ix_(free, ~free)] @ z[~free])
            if np.linalg.eigvalsh(Qff).min() <= 1e-12:
                continue  # no strict interior minimizer on this face
            z[free] = np.linalg.solve(Qff, rhs)
            if np.any(z < lo - 1e-12) or np.any(z > hi + 1e-12):
                continue
        val = 0.5 * z @ Q @ z + c @ z
        if val < best_val:
            best, best_val = np.clip(z, lo, hi), val
    if best is None:
        raise NumericError("no finite minimizer found")
    return best, float(best_val)


@dataclass(frozen=True)
class LyapunovValue:
    integral: float       # trapezoid average of C(s_beta) over [beta1, beta2]
    f_difference: float   # (F(beta2) - F(beta1)) / (beta2 - beta1)
    error_estimate: float  # |T_h - T_2h|, a conservative bound on the trapezoid error
    floor: float = 1e-10

    @property
    def value(self) -> float:
        return self.integral

    @property
    def tolerance(self) -> float:
        return 2.0 * abs(self.error_estimate) + self.floor * max(1.0, abs(self.integral))

    @property
    def consistent(self) -> bool:
        return abs(self.integral - self.f_difference) <= self.tolerance


def _trapezoid_mean(betas, values) -> float:
    return float(np.trapezoid(values, betas) / (betas[-1] - betas[0]))


def lyapunov_value(model: EnergyModel, theta, x, y, beta1: float, beta2: float, grid: BetaGrid | None = None,
                   coord: CoordConfig | None = None, gradflow: GradFlowConfig | None = None) -> LyapunovValue:
    """Average of C(s_beta) over [beta1, beta2] with its free-energy form and error estimate."""
    if beta2 < beta1:
        raise DomainError("need beta1 <= beta2")
    grid = grid or BetaGrid.uniform(beta1, beta2)
    lo, hi = grid.span
    if not (math.isclose(lo, beta1, abs_tol=1e-15) and math.isclose(hi, beta2, abs_tol=1e-15)):
        raise DomainError(f"grid spans [{lo}, {hi}], expected [{beta1}, {beta2}]")
    scan = nudge_scan(model, theta, x, y, grid, coord, gradflow)
    if grid.points.size == 1:
        c = float(scan.cost[0])
        return LyapunovValue(c, c, 0.0)
    integral = _trapezoid_mean(scan.betas, scan.cost)
    diff = float((scan.free_energy[-1] - scan.free_energy[0]) / (beta2 - beta1))
    n = grid.points.size
    if n >= 3 and n % 2 == 1:
        # |T_h - T_2h| over-estimates the fine-grid error for smooth integrands and
        # stays meaningful near kinks where box constraints switch on
        err = abs(integral - _trapezoid_mean(scan.betas[::2], scan.cost[::2]))
    else:
        err = abs(integral - diff)
    return LyapunovValue(integral, diff, err)


def lyapunov_gradient(model: EnergyModel, theta, x, y, beta1: float, beta2: float,
                      coord: CoordConfig | None = None) -> np.ndarray:
    """Gradient of the Lyapunov function from the two equilibria (envelope theorem)."""
    theta = np.asarray(theta, dtype=float)
    s1 = _relax(model, theta, x, y, beta1, "engine", coord)
    s2 = _relax(model, theta, x, y, beta2, "engine", coord, state=s1)
    return (model.grad_theta_energy(theta, x, s2) - model.grad_theta_energy(theta, x, s1)) / (beta2 - beta1)


# Metric ------------------------------------------------------------------------------------


@dataclass
class MetricEstimate:
    """Curvature of theta -> U(u, theta)/eps + F(beta1, theta) at the previous parameters.

    ``hessian`` is the raw second derivative H; ``metric`` is the rescaled
    D^1/2 H D^1/2 with D = diag(eps), which tends to the identity as eps -> 0.
    """

    hessian: np.ndarray
    epsilon: np.ndarray
    asymmetry: float

    @property
    def metric(self) -> np.ndarray:
        r = np.sqrt(self.epsilon)
        return r[:, None] * self.hessian * r[None, :]

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.metric)

    @property
    def positive_definite(self) -> bool:
        return bool(self.eigenvalues.min() > 0)

    def predict_step(self, lyapunov_grad: np.ndarray, width: float) -> np.ndarray:
        """Predicted parameter change -width * H^-1 grad."""
        return -width * np.linalg.solve(self.hessian, lyapunov_grad)


def riemannian_metric(model: EnergyModel, theta, x, y, beta1: float, coupling: CouplingSpec, control=None,
                      h: float = 1e-4, coord: CoordConfig | None = None, max_params: int = 400) -> MetricEstimate:
    """Finite-difference Hessian of the control energy plus F(beta1, .), symmetrized.

    dF/dtheta is evaluated as dE/dtheta at the relaxed state (envelope theorem)
    and differenced with step h.
    """
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    if n > max_params:
        raise DomainError(f"{n} parameters exceed the metric limit of {max_params}")
    control = theta if control is None else np.asarray(control, dtype=float)

    def grad_F(th):
        s = _relax(model, th, x, y, beta1, "engine", coord)
        return model.grad_theta_energy(th, x, s)

    H = np.empty((n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        H[:, k] = (grad_F(theta + e) - grad_F(theta - e)) / (2 * h)
    H += np.diag(coupling.hess_diag_theta(control, theta))
    asym = float(np.abs(H - H.T).max(initial=0.0))
    H = 0.5 * (H + H.T)
    return MetricEstimate(H, coupling.component_epsilon(n), asym)


# Theorem suite ------------------------------------------------------------------------------


@dataclass
class Check:
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    criterion: str = ""
    vacuous: bool = False


@dataclass
class SuiteReport:
    model: str
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def status(self) -> int:
        return 0 if self.passed else 1

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"model": self.model, "passed": self.passed,
                "checks": [{**asdict(c), "status": "pass" if c.passed else "fail"} for c in self.checks]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)


@dataclass(frozen=True)
class SuiteConfig:
    n_instances: int = 5
    seed: int = 0
    epsilon: float = 1e-2        # scaling study for the SGD-equivalence check
    beta: float = 1e-2
    sgd_ratio: tuple[float, float] = (1.6, 2.6)
    taylor_epsilon: float = 1e-6  # variant order study
    taylor_beta: float = 0.1
    centered_ratio: tuple[float, float] = (3.0, 5.0)
    metric_epsilon: float = 0.1
    metric_beta: float = 0.1
    metric_ratio: tuple[float, float] = (3.0, 5.0)
    bounds_beta: float = 0.5
    scan_span: float = 0.5
    nodes: int = 21
    slack: float = 1e-8
    lyapunov_epsilon: float = 0.1
    lyapunov_beta: float = 0.1
    vacuous_floor: float = 1e-12


def random_instance(model: EnergyModel, rng: np.random.Generator, batch: int = 1):
    """A random (theta, x, y) for linear regression or a small dense Hopfield model."""
    if isinstance(model, LinRegModel):
        theta = rng.standard_normal(model.param_layout.size) / math.sqrt(model.n_features)
        x = rng.uniform(-1, 1, size=batch)
        y = target_eval(sample_target(int(rng.integers(1 << 31))), x)
        return theta, x, y
    if isinstance(model, HopfieldModel):
        theta = init_params(model, [1.0] * model.n_layers, int(rng.integers(1 << 31)))
        theta = theta + 0.1 * rng.standard_normal(theta.size)
        x = rng.uniform(0, 1, size=(batch,) + model.input_shape)
        n_out = int(np.prod(model.layers[-1].shape))
        y = np.eye(n_out)[rng.integers(0, n_out, size=batch)]
        return theta, x, y
    raise DomainError(f"no instance generator for {type(model).__name__}")


def _step_delta(model, theta, x, y, variant, epsilon, coord=TIGHT):
    from .train import AeqpropConfig, aeqprop_step

    cfg = AeqpropConfig(variant=variant, epsilon=epsilon, coord=coord)
    new, record = aeqprop_step(model, theta, x, y, cfg)
    if record.diverged:
        raise NumericError(record.message)
    return new - np.asarray(theta, dtype=float)


def _rel(a, b, floor):
    nb = float(np.linalg.norm(b))
    na = float(np.linalg.norm(a - b))
    if nb < floor:
        return 0.0 if na < floor else math.inf
    return na / nb


def _ratio_check(name, errors_coarse, errors_fine, bounds, floor, criterion):
    coarse, fine = float(np.median(errors_coarse)), float(np.median(errors_fine))
    if coarse < floor and fine < floor:
        return Check(name, True, {"coarse": coarse, "fine": fine}, criterion, vacuous=True)
    ratio = coarse / fine if fine > 0 else math.inf
    return Check(name, bool(bounds[0] <= ratio <= bounds[1]),
                 {"coarse": coarse, "fine": fine, "ratio": ratio}, criterion)


def _guarded(name, criterion, fn):
    try:
        return fn()
    except (NumericError, DomainError, np.linalg.LinAlgError) as exc:
        return Check(name, False, {"error": f"{type(exc).__name__}: {exc}"}, criterion)


def check_sgd_equivalence(model, instances, cfg: SuiteConfig) -> Check:
    """(theta_prev - theta)/(eps beta) vs. the oracle loss gradient; error must halve with (eps, beta)."""
    crit = f"error ratio under halving in {list(cfg.sgd_ratio)}"

    def run():
        errs = {1: [], 2: []}
        for theta, x, y in instances:
            g = fd_loss_grad(model, theta, x, y, relax="probe")
            for k in (1, 2):
                eps, beta = cfg.epsilon / k, cfg.beta / k
                d = _step_delta(model, theta, x, y, NudgeVariant.optimistic(beta), eps)
                errs[k].append(_rel(-d / (eps * beta), g, cfg.vacuous_floor))
        return _ratio_check("sgd_equivalence", errs[1], errs[2], cfg.sgd_ratio, cfg.vacuous_floor, crit)

    return _guarded("sgd_equivalence", crit, run)


def check_lyapunov_decrease(model, instances, cfg: SuiteConfig) -> Check:
    crit = "L(theta_t) <= L(theta_prev) + quadrature tolerance for every variant and instance"

    def run():
        worst, count, inconsistent = -math.inf, 0, 0
        for variant in ("optimistic", "pessimistic", "centered"):
            v = NudgeVariant.from_name(variant, cfg.lyapunov_beta)
            grid = BetaGrid.uniform(v.beta1, v.beta2, cfg.nodes)
            for theta, x, y in instances:
                d = _step_delta(model, theta, x, y, v, cfg.lyapunov_epsilon)
                before = lyapunov_value(model, theta, x, y, v.beta1, v.beta2, grid, TIGHT)
                after = lyapunov_value(model, theta + d, x, y, v.beta1, v.beta2, grid, TIGHT)
                excess = after.value - before.value - (before.tolerance + after.tolerance)
                worst = max(worst, excess)
                count += excess > 0
                inconsistent += not (before.consistent and after.consistent)
        return Check("lyapunov_decrease", count == 0 and inconsistent == 0,
                     {"violations": count, "worst_excess": worst, "quadrature_inconsistencies": inconsistent}, crit)

    return _guarded("lyapunov_decrease", crit, run)


def check_loss_bounds(model, instances, cfg: SuiteConfig) -> Check:
    crit = f"L(0;b) <= C(s_0) <= L(-b;0) at b={cfg.bounds_beta}, slack >= -{cfg.slack}"

    def run():
        b = cfg.bounds_beta
        slack = math.inf
        for theta, x, y in instances:
            c0 = loss_value(model, theta, x, y, coord=TIGHT)
            upper = lyapunov_value(model, theta, x, y, -b, 0.0, coord=TIGHT).f_difference
            lower = lyapunov_value(model, theta, x, y, 0.0, b, coord=TIGHT).f_difference
            slack = min(slack, c0 - lower, upper - c0)
        return Check("loss_bounds", slack >= -cfg.slack, {"min_slack": slack}, crit)

    return _guarded("loss_bounds", crit, run)


def check_monotone_concave(model, instances, cfg: SuiteConfig) -> Check:
    crit = f"C(s_beta) non-increasing and F concave on {cfg.nodes} nodes in [-{cfg.scan_span}, {cfg.scan_span}]"

    def run():
        grid = BetaGrid.uniform(-cfg.scan_span, cfg.scan_span, cfg.nodes)
        rise, bulge = -math.inf, -math.inf
        for theta, x, y in instances:
            scan = nudge_scan(model, theta, x, y, grid, TIGHT)
            rise = max(rise, float(np.diff(scan.cost).max()))
            bulge = max(bulge, float(np.diff(scan.free_energy, 2).max()))
        ok = rise <= cfg.slack and bulge <= cfg.slack
        return Check("monotone_concave", ok, {"max_cost_increase": rise, "max_second_difference": bulge}, crit)

    return _guarded("monotone_concave", crit, run)


def check_free_energy_derivative(model, instances, cfg: SuiteConfig, h: float = 1e-4) -> Check:
    crit = "(F(b+h) - F(b-h)) / 2h matches C(s_b) within 1e-3 relative"

    def run():
        worst = 0.0
        for theta, x, y in instances:
            for b in (-0.2, 0.0, 0.3):
                dF = (free_energy_F(model, theta, x, y, b + h, TIGHT) - free_energy_F(model, theta, x, y, b - h, TIGHT)) / (2 * h)
                c = model.cost(_relax(model, theta, x, y, b, coord=TIGHT), y)
                worst = max(worst, abs(dF - c) / max(abs(c), 1e-8))
        return Check("free_energy_derivative", worst < 1e-3, {"max_relative_error": worst}, crit)

    return _guarded("free_energy_derivative", crit, run)


def check_variant_orders(model, instances, cfg: SuiteConfig) -> Check:
    crit = (f"centered error ratio in {list(cfg.centered_ratio)} and optimistic ratio in "
            f"{list(cfg.sgd_ratio)} when beta halves")

    def run():
        eps = cfg.taylor_epsilon
        errs = {(v, k): [] for v in ("centered", "optimistic") for k in (1, 2)}
        for theta, x, y in instances:
            g = fd_loss_grad(model, theta, x, y, relax="probe")
            for name in ("centered", "optimistic"):
                for k in (1, 2):
                    beta = cfg.taylor_beta / k
                    d = _step_delta(model, theta, x, y, NudgeVariant.from_name(name, beta), eps)
                    errs[(name, k)].append(_rel(-d, eps * beta * g, cfg.vacuous_floor * eps * beta))
        c = _ratio_check("centered", errs[("centered", 1)], errs[("centered", 2)], cfg.centered_ratio,
                         cfg.vacuous_floor, "")
        o = _ratio_check("optimistic", errs[("optimistic", 1)], errs[("optimistic", 2)], cfg.sgd_ratio,
                         cfg.vacuous_floor, "")
        return Check("variant_orders", c.passed and o.passed, {"centered": c.measured, "optimistic": o.measured},
                     crit, vacuous=c.vacuous and o.vacuous)

    return _guarded("variant_orders", crit, run)


def metric_residual(model, theta, x, y, epsilon, beta, variant: str = "optimistic") -> float:
    """Relative gap between the measured step and the metric-preconditioned prediction."""
    v = NudgeVariant.from_name(variant, beta)
    coupling = CouplingSpec.quadratic(epsilon, model.param_layout)
    measured = _step_delta(model, theta, x, y, v, epsilon)
    est = riemannian_metric(model, theta, x, y, v.beta1, coupling, coord=TIGHT)
    grad = lyapunov_gradient(model, theta, x, y, v.beta1, v.beta2, TIGHT)
    predicted = est.predict_step(grad, v.width)
    return _rel(predicted, measured, 1e-300)


def check_metric_step(model, instances, cfg: SuiteConfig) -> Check:
    crit = f"metric-step residual ratio in {list(cfg.metric_ratio)} when (eps, beta) halve"

    def run():
        errs = {1: [], 2: []}
        for theta, x, y in instances:
            for k in (1, 2):
                errs[k].append(metric_residual(model, theta, x, y, cfg.metric_epsilon / k, cfg.metric_beta / k))
        return _ratio_check("metric_step", errs[1], errs[2], cfg.metric_ratio, cfg.vacuous_floor, crit)

    return _guarded("metric_step", crit, run)


def theorem_suite(model: EnergyModel, cfg: SuiteConfig | None = None, instances=None) -> SuiteReport:
    """Run every check on seeded random instances (or on the given ``(theta, x, y)`` list)."""
    cfg = cfg or SuiteConfig()
    if instances is None:
        rng = np.random.default_rng(cfg.seed)
        instances = [random_instance(model, rng) for _ in range(cfg.n_instances)]
    checks = [
        check_sgd_equivalence(model, instances, cfg),
        check_lyapunov_decrease(model, instances, cfg),
        check_loss_bounds(model, instances, cfg),
        check_monotone_concave(model, instances, cfg),
        check_free_energy_derivative(model, instances, cfg),
        check_variant_orders(model, instances, cfg),
    ]
    if model.param_layout.size <= 400:
        checks.append(check_metric_step(model, instances, cfg))
    return SuiteReport(repr(model), checks)
