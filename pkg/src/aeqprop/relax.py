"""Equilibration engines and the homeostatic controller.

Two engines find (approximate) minimizers of the global energy:

* :func:`relax_gradflow` runs adaptive gradient descent on s, theta and the
  controller dynamics on u, accepting a step only if the energy drops.
* :func:`relax_coordinate` exploits that every scalar slice of the energy of
  the shipped models is a convex quadratic and sets blocks of variables to
  their exact box-constrained minimizers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    CouplingSpec,
    CurvatureError,
    DomainError,
    EnergyModel,
    NumericError,
    RelaxOutcome,
    state_curv,
    state_energy,
    state_grad,
    state_grad_segment,
    unlift,
)


# Scalar quadratic minimization -------------------------------------------------


def quadratic_box_min(a, b, p, q):
    """Minimizer of ``a z^2 + b z`` over ``[p, q]``; vectorized over its arguments.

    ``a = 0`` is accepted when the linear slope points toward a finite bound
    (the minimizer is that bound) or vanishes (the bound-projected origin is
    returned). Negative curvature raises :class:`CurvatureError`.
    """
    a, b, p, q = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, p, q)))
    if np.any(p > q):
        raise DomainError("empty interval: p > q")
    if np.any(a < 0):
        raise CurvatureError("slice is not convex (a < 0)")
    flat = a == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(flat, 0.0, -b / (2.0 * np.where(flat, 1.0, a)))
    if np.any(flat):
        z = np.where(flat & (b > 0), -np.inf, z)
        z = np.where(flat & (b < 0), np.inf, z)
    z = np.clip(z, p, q)
    if not np.all(np.isfinite(z)):
        raise CurvatureError("linear slice is unbounded below on its interval")
    return float(z) if z.ndim == 0 else z


def _slice_min(z, g, h, lo, hi):
    """Exact minimizer of each scalar slice given value z, slope g and curvature h."""
    if np.any(h < 0):
        raise CurvatureError(f"negative slice curvature (min {np.min(h):.3g})")
    flat = h == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        new = z - g / np.where(flat, 1.0, h)
    if np.any(flat):
        new = np.where(flat, np.where(g > 0, -np.inf, np.where(g < 0, np.inf, z)), new)
    new = np.clip(new, lo, hi)
    if not np.all(np.isfinite(new)):
        raise CurvatureError("linear slice is unbounded below on its interval")
    return new


# Configurations ------------------------------------------------------------------


@dataclass(frozen=True)
class GradFlowConfig:
    """Adaptive gradient flow settings.

    ``eta_theta0`` of None starts the parameter step at eps (per component).
    The state step applies to each batch replica's own energy, so ``eta_s0``
    does not depend on the batch size.
    """

    n_steps: int = 50
    eta_s0: float = 1.0
    eta_theta0: float | None = None
    accept_grow: float = 1.05
    reject_shrink: float = 0.5
    tie_factor: float = 1.05
    tie_tol: float = 1e-14
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 0:
            raise DomainError("n_steps must be >= 0")
        if self.eta_s0 <= 0 or (self.eta_theta0 is not None and self.eta_theta0 <= 0):
            raise DomainError("step sizes must be > 0")
        if not (self.accept_grow > 0 and 0 < self.reject_shrink < 1 and self.tie_factor > 0):
            raise DomainError("invalid step-size adaptation factors")


@dataclass(frozen=True)
class CoordConfig:
    """Coordinate relaxation settings.

    ``sweep_order`` "auto" sweeps layers forward when the effective nudge is
    zero and backward otherwise. ``param_mode`` "parallel" updates all
    parameter segments at once when the model allows it. With floating
    parameters, ``param_schedule`` "every_sweep" relaxes theta after each
    state sweep (joint minimization); "after_state" settles the state at
    fixed theta first and then relaxes theta once.
    """

    max_iters: int = 100
    threshold: float = 1e-3
    sweep_order: str = "auto"
    param_mode: str = "parallel"
    param_schedule: str = "every_sweep"
    check_monotone: bool = False
    monotone_slack: float = 1e-12

    def __post_init__(self):
        if self.threshold <= 0:
            raise DomainError("threshold must be > 0")
        if self.max_iters < 1:
            raise DomainError("max_iters must be >= 1")
        if self.sweep_order not in ("auto", "forward", "backward"):
            raise DomainError(f"unknown sweep order {self.sweep_order!r}")
        if self.param_mode not in ("parallel", "sequential"):
            raise DomainError(f"unknown param mode {self.param_mode!r}")
        if self.param_schedule not in ("every_sweep", "after_state"):
            raise DomainError(f"unknown param schedule {self.param_schedule!r}")


@dataclass(frozen=True)
class ThresholdState:
    xi: float = 1e-3
    gamma: float = 0.01
    floor: float = 1e-12

    def __post_init__(self):
        if self.xi <= 0:
            raise DomainError("threshold must be > 0")


def update_threshold(ts: ThresholdState, mu_t: float) -> ThresholdState:
    """xi <- min(xi, gamma * mu), never below the floor."""
    if mu_t < 0 or not math.isfinite(mu_t):
        raise DomainError("mu_t must be a finite value >= 0")
    return replace(ts, xi=max(min(ts.xi, ts.gamma * mu_t), ts.floor))


# Coordinate engine -----------------------------------------------------------------


def _batch_size(x) -> int:
    return int(np.shape(np.atleast_1d(x))[0])


class _Energy:
    """Global energy at fixed (x, y, beta) for repeated monotonicity checks."""

    def __init__(self, model, x, y, beta, coupling, control):
        self.model, self.x, self.y, self.beta = model, x, y, beta
        self.coupling, self.control = coupling, control

    def __call__(self, theta, s) -> float:
        e = state_energy(self.model, theta, self.x, self.y, s, self.beta)
        if self.coupling is not None and self.control is not None:
            e += self.coupling.energy(self.control, theta)
        return float(e)


def relax_coordinate(model: EnergyModel, theta, x, y, beta: float, config: CoordConfig | None = None,
                     state=None, control=None, coupling: CouplingSpec | None = None,
                     float_params: bool = False) -> RelaxOutcome:
    """Minimize the global energy by exact block-coordinate updates.

    With ``float_params`` the parameters relax too, tied to the clamped
    ``control`` through ``coupling``; otherwise theta is frozen. The residual
    is the L1 change of one sweep, per batch element for the state, plus the
    L1 change of theta when it floats.
    """
    config = config or CoordConfig()
    if not model.exact_relaxation:
        raise DomainError(f"{type(model).__name__} does not support exact coordinate relaxation")
    if float_params and (control is None or coupling is None):
        raise DomainError("floating parameters need a control vector and a coupling")
    layout = model.state_layout(x)
    plyt = model.param_layout
    theta = np.array(plyt.check(theta, "theta"), dtype=float)
    s = layout.clip(np.array(layout.check(state, "state"), dtype=float)) if state is not None else model.init_state(x)
    if float_params:
        control = plyt.check(np.asarray(control, dtype=float), "control")
        eps_c = coupling.component_epsilon(plyt.size)
    batch = _batch_size(x)
    effective = beta + unlift(model)[1]
    order = config.sweep_order
    if order == "auto":
        order = "forward" if effective == 0 else "backward"
    names = layout.names if order == "forward" else layout.names[::-1]
    bounds = {n: (layout.lower_bounds()[layout.slice(n)], layout.upper_bounds()[layout.slice(n)]) for n in names}
    energy = _Energy(model, x, y, beta, coupling if float_params else None, control)
    history: list[float] = []
    current = energy(theta, s) if config.check_monotone else math.nan
    if config.check_monotone:
        history.append(current)

    def check(new_value, what):
        if new_value > current + config.monotone_slack * max(1.0, abs(current)):
            raise NumericError(f"{what} update raised the energy from {current!r} to {new_value!r}")
        history.append(new_value)
        return new_value

    sweep_params = float_params and config.param_schedule == "every_sweep"
    residual = math.inf
    it = 0
    converged = False
    for it in range(1, config.max_iters + 1):
        s_prev = s.copy()
        theta_prev = theta.copy() if sweep_params else None
        for name in names:
            sl = layout.slice(name)
            lo, hi = bounds[name]
            if model.separable_state:
                g = state_grad_segment(model, theta, x, y, s, beta, name)
                h = state_curv(model, theta, x, y, s, beta)[sl]
                s[sl] = _slice_min(s[sl], g, h, lo, hi)
            else:
                for i in range(sl.start, sl.stop):
                    g = state_grad(model, theta, x, y, s, beta)[i]
                    h = state_curv(model, theta, x, y, s, beta)[i]
                    s[i] = _slice_min(s[i], g, h, lo[i - sl.start], hi[i - sl.start])
            if config.check_monotone:
                current = check(energy(theta, s), f"state segment {name!r}")
        if sweep_params:
            theta, current = _relax_params(model, theta, x, s, control, coupling, eps_c, config,
                                           energy, current, check)
        residual = float(np.abs(s - s_prev).sum()) / batch
        if sweep_params:
            residual += float(np.abs(theta - theta_prev).sum())
        if not math.isfinite(residual):
            raise NumericError("coordinate relaxation produced non-finite values")
        if residual < config.threshold:
            converged = True
            break
    if float_params and not sweep_params:
        theta, current = _relax_params(model, theta, x, s, control, coupling, eps_c, config,
                                       energy, current, check)
    final = energy(theta, s)
    if not math.isfinite(final):
        raise NumericError(f"energy is not finite at the relaxed point ({final})")
    return RelaxOutcome(state=s, params=theta, iterations=it, residual=residual, energy=final,
                        converged=converged, control=control if float_params else None, history=history)


def _param_slice_update(model, theta, x, s, control, coupling, name):
    plyt = model.param_layout
    sl = plyt.slice(name)
    g = model.grad_theta_energy_segment(theta, x, s, name).ravel() + coupling.grad_theta(control, theta)[sl]
    h = model.curv_theta_energy(theta, x, s)[sl] + coupling.hess_diag_theta(control, theta)[sl]
    return sl, _slice_min(theta[sl], g, h, -np.inf, np.inf)


def _relax_segment_sequential(model, theta, x, s, control, coupling, name):
    plyt = model.param_layout
    sl = plyt.slice(name)
    if model.separable_params:
        _, theta[sl] = _param_slice_update(model, theta, x, s, control, coupling, name)
        return theta
    h_seg = model.curv_theta_energy(theta, x, s)[sl] + coupling.hess_diag_theta(control, theta)[sl]
    for j, i in enumerate(range(sl.start, sl.stop)):
        g = model.grad_theta_energy_segment(theta, x, s, name).ravel()[j] + coupling.grad_theta(control, theta)[i]
        theta[i] = _slice_min(theta[i], g, h_seg[j], -np.inf, np.inf)
    return theta


def _relax_params(model, theta, x, s, control, coupling, eps_c, config, energy, current, check):
    names = model.param_layout.names
    if model.block_params and coupling.form == "quadratic":
        # E is jointly quadratic in theta: minimize the whole parameter block exactly
        g = model.grad_theta_energy(theta, x, s) + coupling.grad_theta(control, theta)
        H = model.hess_theta_energy(theta, x, s) + np.diag(1.0 / eps_c)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            raise CurvatureError("parameter block Hessian is singular") from None
        theta = theta - step
        if config.check_monotone:
            current = check(energy(theta, s), "parameter block")
        return theta, current
    if config.param_mode == "parallel" and model.params_decoupled and model.separable_params:
        updates = [_param_slice_update(model, theta, x, s, control, coupling, n) for n in names]
        trial = theta.copy()
        for sl, val in updates:
            trial[sl] = val
        if not config.check_monotone:
            return trial, current
        new_value = energy(trial, s)
        if new_value <= current + config.monotone_slack * max(1.0, abs(current)):
            history_value = check(new_value, "parallel parameter")
            return trial, history_value
        # parallel update increased the energy: fall back to one segment at a time
    for name in names:
        theta = _relax_segment_sequential(model, theta, x, s, control, coupling, name)
        if config.check_monotone:
            current = check(energy(theta, s), f"parameter segment {name!r}")
    return theta, current


# Gradient-flow engine -------------------------------------------------------------


def critical_damping_matrix(epsilon: float) -> np.ndarray:
    """Linearized continuous-time (theta, u) dynamics of the homeostatic controller.

    With the controller gain 1/(4 eps) both eigenvalues equal -1/(2 eps).
    """
    return np.array([[-1.0 / epsilon, 1.0 / epsilon], [-1.0 / (4.0 * epsilon), 0.0]])


class _StepSize:
    def __init__(self, value, config: GradFlowConfig, rng):
        self.value = value
        self.config = config
        self.rng = rng

    def judge(self, old: float, new: float) -> bool:
        """Adapt the step size and tell whether the trial step is kept."""
        cfg = self.config
        if not math.isfinite(new):
            self.value = self.value * cfg.reject_shrink
            return False
        if new < old - cfg.tie_tol:
            self.value = self.value * cfg.accept_grow
            return True
        if new > old + cfg.tie_tol:
            self.value = self.value * cfg.reject_shrink
            return False
        self.value = self.value * (cfg.tie_factor if self.rng.random() < 0.5 else 1.0 / cfg.tie_factor)
        return True


def relax_gradflow(model: EnergyModel, theta, x, y, beta: float, config: GradFlowConfig | None = None,
                   mode: str = "frozen", control=None, coupling: CouplingSpec | None = None,
                   state=None, target=None, rng=None, divergence_limit: float = 1e8) -> RelaxOutcome:
    """Adaptive gradient flow on the global energy.

    Modes: ``frozen`` relaxes s only; ``clamped_u`` relaxes s and theta with the
    control fixed; ``homeostatic`` also moves the control toward keeping theta
    at ``target`` (default: the initial theta). Each iteration tries an s-step
    and a theta-step, keeping each only if the energy does not rise; the
    control moves only after an accepted theta-step.
    """
    config = config or GradFlowConfig()
    if mode not in ("frozen", "clamped_u", "homeostatic"):
        raise DomainError(f"unknown gradient-flow mode {mode!r}")
    layout = model.state_layout(x)
    plyt = model.param_layout
    theta = np.array(plyt.check(theta, "theta"), dtype=float)
    s = layout.clip(np.array(layout.check(state, "state"), dtype=float)) if state is not None else model.init_state(x)
    lo, hi = layout.lower_bounds(), layout.upper_bounds()
    floating = mode != "frozen"
    if floating:
        if coupling is None:
            raise DomainError(f"mode {mode!r} needs a coupling")
        eps = coupling.component_epsilon(plyt.size)
        control = np.array(theta if control is None else plyt.check(control, "control"), dtype=float)
        target = np.array(theta if target is None else target, dtype=float)
        eta_theta = eps.copy() if config.eta_theta0 is None else np.full(plyt.size, config.eta_theta0)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    batch = _batch_size(x)
    energy = _Energy(model, x, y, beta, coupling if floating else None, control)
    current = energy(theta, s)
    eta_s = _StepSize(config.eta_s0, config, rng)
    eta_t = _StepSize(1.0, config, rng)
    history = [current]
    s_change = theta_change = 0.0

    for it in range(1, config.n_steps + 1):
        # state step (each replica follows the gradient of its own energy)
        g = state_grad(model, theta, x, y, s, beta) * batch
        trial = np.clip(s - eta_s.value * g, lo, hi)
        new = energy(theta, trial)
        if eta_s.judge(current, new):
            s_change = float(np.abs(trial - s).sum()) / batch
            s, current = trial, new
            history.append(current)
        else:
            s_change = 0.0
        if not floating:
            continue
        # parameter step
        g_theta = model.grad_theta_energy(theta, x, s) + coupling.grad_theta(control, theta)
        trial = theta - eta_t.value * eta_theta * g_theta
        new = energy(trial, s)
        if eta_t.judge(current, new):
            theta_change = float(np.abs(trial - theta).sum())
            theta, current = trial, new
            history.append(current)
            if mode == "homeostatic":
                eta_u = eta_t.value * eta_theta / (4.0 * eps)
                control = control + eta_u * (target - theta)
                energy.control = control
                current = energy(theta, s)
        else:
            theta_change = 0.0
        if not math.isfinite(current) or abs(current) > divergence_limit or np.abs(theta).max(initial=0) > divergence_limit:
            raise NumericError(f"gradient flow diverged at iteration {it} (energy {current:.3g})")
    if not math.isfinite(current) or abs(current) > divergence_limit:
        raise NumericError(f"gradient flow ended at energy {current:.3g}")
    return RelaxOutcome(state=s, params=theta, iterations=config.n_steps, residual=s_change + theta_change,
                        energy=current, converged=True, control=control if floating else None, history=history)


# Dispatch and homeostasis ------------------------------------------------------------


def relax_state(model: EnergyModel, theta, x, y, beta: float, coord: CoordConfig | None = None,
                gradflow: GradFlowConfig | None = None, state=None, relaxer: str | None = None) -> RelaxOutcome:
    """Relax s with theta frozen, using the coordinate engine when the model allows it."""
    relaxer = relaxer or ("coordinate" if model.exact_relaxation else "gradflow")
    if relaxer == "coordinate":
        return relax_coordinate(model, theta, x, y, beta, coord, state=state)
    if relaxer == "gradflow":
        return relax_gradflow(model, theta, x, y, beta, gradflow, mode="frozen", state=state)
    raise DomainError(f"unknown relaxer {relaxer!r}")


def analytic_homeostasis(model: EnergyModel, theta, x, y, beta: float, coupling: CouplingSpec,
                         coord: CoordConfig | None = None, gradflow: GradFlowConfig | None = None,
                         state=None, relaxer: str | None = None) -> tuple[np.ndarray, RelaxOutcome]:
    """Control value holding theta in place, plus the state relaxation it was computed from."""
    outcome = relax_state(model, theta, x, y, beta, coord, gradflow, state=state, relaxer=relaxer)
    grad = model.grad_theta_energy(np.asarray(theta, dtype=float), x, outcome.state)
    u = coupling.control_for(np.asarray(theta, dtype=float), grad)
    outcome.control = u
    return u, outcome


def homeostatic_control_analytic(model: EnergyModel, theta, x, y, beta: float, coupling: CouplingSpec,
                                 coord: CoordConfig | None = None, state=None) -> np.ndarray:
    """Relax s with theta frozen, then return u = theta + eps * dE/dtheta at that state."""
    return analytic_homeostasis(model, theta, x, y, beta, coupling, coord, state=state)[0]
