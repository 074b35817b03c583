"""Two-phase training step, the epoch loop, and the SGD and classic two-measurement baselines."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from .core import (
    CouplingSpec,
    DomainError,
    EnergyModel,
    NudgeVariant,
    NumericError,
    RelaxOutcome,
)
from .relax import (
    CoordConfig,
    GradFlowConfig,
    ThresholdState,
    analytic_homeostasis,
    relax_coordinate,
    relax_gradflow,
    relax_state,
    update_threshold,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AeqpropConfig:
    """Hyperparameters of one training run.

    ``epsilon`` is a scalar, a per-segment mapping, or a per-component vector.
    ``homeostatic_mode`` "analytic" solves for the control in closed form,
    "controller" runs the gradient-flow controller. ``lr_decay`` multiplies
    eps after every epoch.
    """

    variant: NudgeVariant
    epsilon: float | Mapping[str, float] | np.ndarray = 0.01
    homeostatic_mode: str = "analytic"
    relaxer: str = "coordinate"
    coord: CoordConfig = field(default_factory=CoordConfig)
    gradflow: GradFlowConfig = field(default_factory=GradFlowConfig)
    lr_decay: float = 1.0
    adaptive_threshold: bool = False
    gamma: float = 0.01
    monitor_phase: bool = True
    verify_lyapunov: bool = False
    lyapunov_nodes: int = 21
    divergence_limit: float = 1e8
    seed: int = 0

    def __post_init__(self):
        if self.homeostatic_mode not in ("analytic", "controller"):
            raise DomainError(f"unknown homeostatic mode {self.homeostatic_mode!r}")
        if self.relaxer not in ("coordinate", "gradflow"):
            raise DomainError(f"unknown relaxer {self.relaxer!r}")
        if self.homeostatic_mode == "controller" and self.relaxer != "gradflow":
            raise DomainError("the controller homeostatic mode runs on the gradient-flow relaxer")
        if not 0 < self.lr_decay <= 1:
            raise DomainError("lr_decay must lie in (0, 1]")

    @property
    def beta(self) -> float:
        return self.variant.width

    def coupling(self, model: EnergyModel, scale: float = 1.0) -> CouplingSpec:
        return CouplingSpec.quadratic(model.param_layout.broadcast(self.epsilon) * scale)


@dataclass
class StepRecord:
    step: int
    loss: float
    lyapunov: float = math.nan
    dtheta_norm: float = 0.0
    phase_gap: float = 0.0
    iterations: int = 0
    controller_residual: float = 0.0
    lyapunov_after: float = math.nan
    lyapunov_tolerance: float = math.nan
    converged: bool = True
    diverged: bool = False
    message: str = ""

    @property
    def lyapunov_violation(self) -> bool:
        if math.isnan(self.lyapunov) or math.isnan(self.lyapunov_after):
            return False
        return self.lyapunov_after > self.lyapunov + self.lyapunov_tolerance


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    train_error: float = math.nan
    test_error: float = math.nan
    xi: float = math.nan
    epsilon_scale: float = 1.0


@dataclass
class TrainTrace:
    method: str = "aeqprop"
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    diverged: bool = False
    theta: np.ndarray | None = None

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.steps])

    def lyapunov_violations(self) -> int:
        return sum(r.lyapunov_violation for r in self.steps)


# Single step ---------------------------------------------------------------------


def _divergent(theta, energy, limit) -> bool:
    return (not np.all(np.isfinite(theta))) or float(np.abs(theta).max(initial=0.0)) > limit \
        or not math.isfinite(energy) or abs(energy) > limit


def _relax_frozen(model, theta, x, y, beta, cfg: AeqpropConfig, state=None) -> RelaxOutcome:
    return relax_state(model, theta, x, y, beta, cfg.coord, cfg.gradflow, state=state,
                       relaxer=cfg.relaxer if model.exact_relaxation else "gradflow")


def _phase_gap(a: np.ndarray, b: np.ndarray, x) -> float:
    return float(np.abs(a - b).sum()) / int(np.shape(np.atleast_1d(x))[0])


def aeqprop_step(model: EnergyModel, theta, x, y, cfg: AeqpropConfig, coupling: CouplingSpec | None = None,
                 step: int = 0, rng=None) -> tuple[np.ndarray, StepRecord]:
    """One homeostatic phase at beta1 followed by one clamped phase at beta2.

    Returns the new equilibrium parameters and the step record. On numerical
    blow-up the old parameters are returned and the record is flagged.
    """
    theta = np.asarray(theta, dtype=float)
    coupling = coupling or cfg.coupling(model)
    b1, b2 = cfg.variant.beta1, cfg.variant.beta2
    rng = rng if rng is not None else np.random.default_rng(cfg.gradflow.seed + step)
    relaxer = cfg.relaxer if model.exact_relaxation else "gradflow"
    record = StepRecord(step=step, loss=math.nan)
    iterations = 0
    try:
        warm = None
        if b1 != 0:
            free = _relax_frozen(model, theta, x, y, 0.0, cfg)
            iterations += free.iterations
            record.loss = model.cost(free.state, y)
            warm = free.state if cfg.monitor_phase else None
        # phase A: find the control keeping theta at its current value under nudge beta1
        if cfg.homeostatic_mode == "analytic":
            u, phase_a = analytic_homeostasis(model, theta, x, y, b1, coupling, cfg.coord, cfg.gradflow,
                                              state=warm, relaxer=relaxer)
            theta_a = theta
        else:
            phase_a = relax_gradflow(model, theta, x, y, b1, cfg.gradflow, mode="homeostatic",
                                     control=theta, coupling=coupling, state=warm, target=theta, rng=rng,
                                     divergence_limit=cfg.divergence_limit)
            u, theta_a = phase_a.control, phase_a.params
        iterations += phase_a.iterations
        if b1 == 0:
            record.loss = model.cost(phase_a.state, y)
        grad_a = model.grad_theta_energy(theta, x, phase_a.state) + coupling.grad_theta(u, theta)
        record.controller_residual = float(np.max(np.abs(coupling.component_epsilon(theta.size) * grad_a),
                                                  initial=0.0))
        # phase B: clamp the control, nudge with beta2 and let (s, theta) settle
        if relaxer == "coordinate":
            phase_b = relax_coordinate(model, theta_a, x, y, b2, cfg.coord, state=phase_a.state,
                                       control=u, coupling=coupling, float_params=True)
        else:
            phase_b = relax_gradflow(model, theta_a, x, y, b2, cfg.gradflow, mode="clamped_u", control=u,
                                     coupling=coupling, state=phase_a.state, rng=rng,
                                     divergence_limit=cfg.divergence_limit)
        iterations += phase_b.iterations
    except NumericError as exc:  # includes non-convex slices
        record.diverged = True
        record.message = f"{type(exc).__name__}: {exc}"
        record.iterations = iterations
        return theta, record
    new_theta = phase_b.params
    record.iterations = iterations
    record.converged = bool(phase_a.converged and phase_b.converged)
    record.dtheta_norm = float(np.linalg.norm(new_theta - theta))
    record.phase_gap = _phase_gap(phase_b.state, phase_a.state, x)
    if _divergent(new_theta, phase_b.energy, cfg.divergence_limit) or not math.isfinite(record.loss) \
            or abs(record.loss) > cfg.divergence_limit:
        record.diverged = True
        record.message = "parameters or energy exceeded the divergence limit"
        return theta, record
    if cfg.verify_lyapunov:
        from .verify import BetaGrid, lyapunov_value

        grid = BetaGrid.uniform(b1, b2, cfg.lyapunov_nodes)
        before = lyapunov_value(model, theta, x, y, b1, b2, grid, coord=cfg.coord, gradflow=cfg.gradflow)
        after = lyapunov_value(model, new_theta, x, y, b1, b2, grid, coord=cfg.coord, gradflow=cfg.gradflow)
        record.lyapunov = before.value
        record.lyapunov_after = after.value
        record.lyapunov_tolerance = before.tolerance + after.tolerance
    return new_theta, record


# Loops ---------------------------------------------------------------------------------


def _iterate_batches(data, batch_size: int, seed: int, epoch: int, shuffle: bool):
    from .data import batches

    if shuffle:
        yield from batches(data, batch_size, seed, epoch)
    else:
        x, y = data if isinstance(data, tuple) else (data.images, data.one_hot)
        for start in range(0, len(x), batch_size):
            yield x[start:start + batch_size], y[start:start + batch_size]


def error_rate(model: EnergyModel, theta, x, y, coord: CoordConfig | None = None, batch_size: int = 1000) -> float:
    """Fraction of misclassified samples (arg-max of the output layer vs. arg-max of the target)."""
    wrong = 0
    n = len(x)
    for start in range(0, n, batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        out = relax_state(model, theta, xb, yb, 0.0, coord)
        pred = np.argmax(model.predict(out.state, xb), axis=1)
        wrong += int(np.sum(pred != np.argmax(yb, axis=1)))
    return wrong / n if n else math.nan


def train(model: EnergyModel, data, cfg: AeqpropConfig, epochs: int, theta0, batch_size: int = 1,
          shuffle: bool = True, evaluate: Callable[[np.ndarray], tuple[float, float]] | None = None,
          on_step: Callable[[StepRecord], None] | None = None) -> TrainTrace:
    """Run the two-phase procedure over ``data`` (an ``(x, y)`` pair of arrays or a labeled set).

    After each epoch eps is scaled by ``cfg.lr_decay`` and, when
    ``cfg.adaptive_threshold`` is set, the coordinate threshold follows the
    mean phase gap of the epoch. ``evaluate(theta)`` may return (train error,
    test error) for the epoch record. A divergent step stops the run; the
    trace keeps everything recorded so far.
    """
    if epochs < 0:
        raise DomainError("epochs must be >= 0")
    theta = np.array(theta0, dtype=float)
    trace = TrainTrace(method=cfg.variant.name, theta=theta)
    threshold = ThresholdState(cfg.coord.threshold, cfg.gamma)
    scale = 1.0
    step = 0
    for epoch in range(epochs):
        coupling = cfg.coupling(model, scale)
        run_cfg = replace(cfg, coord=replace(cfg.coord, threshold=threshold.xi))
        gaps, losses = [], []
        for x, y in _iterate_batches(data, batch_size, cfg.seed, epoch, shuffle):
            theta, record = aeqprop_step(model, theta, x, y, run_cfg, coupling, step=step)
            trace.steps.append(record)
            if on_step is not None:
                on_step(record)
            step += 1
            if record.diverged:
                log.warning("step %d diverged: %s", record.step, record.message)
                trace.diverged = True
                trace.theta = theta
                return trace
            gaps.append(record.phase_gap)
            losses.append(record.loss)
        if cfg.adaptive_threshold and gaps:
            threshold = update_threshold(threshold, float(np.mean(gaps)))
        train_err, test_err = evaluate(theta) if evaluate is not None else (math.nan, math.nan)
        trace.epochs.append(EpochRecord(epoch, float(np.mean(losses)) if losses else math.nan,
                                        train_err, test_err, threshold.xi, scale))
        log.info("epoch %d: mean loss %.4g, test error %.4g", epoch, trace.epochs[-1].mean_loss, test_err)
        scale *= cfg.lr_decay
    trace.theta = theta
    return trace


# Baselines ------------------------------------------------------------------------------


def loss_gradient(model: EnergyModel, theta, x, y, coord: CoordConfig | None = None) -> np.ndarray:
    """True gradient of the loss: closed form when the model has one, else central differences."""
    if hasattr(model, "loss_grad"):
        return model.loss_grad(theta, x, y)
    from .verify import fd_loss_grad

    return fd_loss_grad(model, theta, x, y, relax="engine", coord=coord)


def sgd_baseline(model: EnergyModel, data, lr, epochs: int, theta0, batch_size: int = 1, shuffle: bool = True,
                 seed: int = 0, coord: CoordConfig | None = None, divergence_limit: float = 1e8,
                 grad: Callable | None = None) -> TrainTrace:
    """Plain SGD on the loss C(s(theta, x), y) with per-component learning rate ``lr``.

    Each record holds the loss at the parameters before the update, matching
    what :func:`train` records.
    """
    theta = np.array(theta0, dtype=float)
    lr = model.param_layout.broadcast(lr)
    grad = grad or (lambda th, x, y: loss_gradient(model, th, x, y, coord))
    trace = TrainTrace(method="sgd", theta=theta)
    step = 0
    for epoch in range(epochs):
        losses = []
        for x, y in _iterate_batches(data, batch_size, seed, epoch, shuffle):
            out = relax_state(model, theta, x, y, 0.0, coord)
            loss = model.cost(out.state, y)
            record = StepRecord(step=step, loss=loss, iterations=out.iterations)
            step += 1
            if not math.isfinite(loss) or abs(loss) > divergence_limit:
                record.diverged = True
                record.message = "loss exceeded the divergence limit"
                trace.steps.append(record)
                trace.diverged = True
                trace.theta = theta
                return trace
            delta = lr * grad(theta, x, y)
            theta = theta - delta
            record.dtheta_norm = float(np.linalg.norm(delta))
            trace.steps.append(record)
            losses.append(loss)
        trace.epochs.append(EpochRecord(epoch, float(np.mean(losses)) if losses else math.nan))
    trace.theta = theta
    return trace


def eqprop_estimator(model: EnergyModel, theta, x, y, beta: float, coord: CoordConfig | None = None,
                     gradflow: GradFlowConfig | None = None) -> np.ndarray:
    """Two-measurement estimate (dE/dtheta at s_beta - dE/dtheta at s_0) / beta."""
    if beta == 0:
        raise DomainError("beta must be nonzero")
    theta = np.asarray(theta, dtype=float)
    free = relax_state(model, theta, x, y, 0.0, coord, gradflow)
    nudged = relax_state(model, theta, x, y, beta, coord, gradflow, state=free.state)
    return (model.grad_theta_energy(theta, x, nudged.state) - model.grad_theta_energy(theta, x, free.state)) / beta

