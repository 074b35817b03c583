"""Domain types and the global energy shared by every relaxation engine.

Vectors (parameters, states, controls) are flat float64 arrays paired with a
:class:`Layout` that names contiguous segments and carries per-segment box
bounds. Models expose their derivatives by hand; nothing here differentiates.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np


class AeqpropError(Exception):
    """Base class for errors raised by this package."""


class StructureError(AeqpropError, ValueError):
    """Shapes or layouts are inconsistent."""


class NumericError(AeqpropError, ArithmeticError):
    """A computation produced a non-finite or otherwise unusable value."""


class CurvatureError(NumericError):
    """A one-dimensional energy slice is not convex."""


class DomainError(AeqpropError, ValueError):
    """An argument lies outside the domain of a function."""


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    lower: float = -math.inf
    upper: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 0 for d in self.shape):
            raise StructureError(f"segment {self.name!r} has a negative dimension")
        if not self.lower <= self.upper:
            raise StructureError(f"segment {self.name!r} has empty box [{self.lower}, {self.upper}]")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class Layout:
    """Ordered named segments of a flat vector.

    Segment views returned by :meth:`view` share memory with the flat array,
    so engines can update one segment in place without copying the rest.
    """

    def __init__(self, segments: Sequence[Segment]):
        self.segments = tuple(segments)
        names = [seg.name for seg in self.segments]
        if len(set(names)) != len(names):
            raise StructureError(f"duplicate segment names in {names}")
        self._slices = {}
        offset = 0
        for seg in self.segments:
            self._slices[seg.name] = slice(offset, offset + seg.size)
            offset += seg.size
        self.size = offset

    def __repr__(self):
        inner = ", ".join(f"{s.name}{list(s.shape)}" for s in self.segments)
        return f"Layout({inner})"

    def __eq__(self, other):
        return isinstance(other, Layout) and self.segments == other.segments

    def __hash__(self):
        return hash(self.segments)

    @property
    def names(self) -> list[str]:
        return [seg.name for seg in self.segments]

    def segment(self, name: str) -> Segment:
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(name)

    def slice(self, name: str) -> slice:
        return self._slices[name]

    def view(self, values: np.ndarray, name: str) -> np.ndarray:
        return values[self._slices[name]].reshape(self.segment(name).shape)

    def split(self, values: np.ndarray) -> dict[str, np.ndarray]:
        self.check(values)
        return {seg.name: self.view(values, seg.name) for seg in self.segments}

    def join(self, parts: Mapping[str, np.ndarray]) -> np.ndarray:
        out = np.empty(self.size)
        for seg in self.segments:
            part = np.asarray(parts[seg.name], dtype=float)
            if part.size != seg.size:
                raise StructureError(f"segment {seg.name!r}: expected {seg.size} values, got {part.size}")
            out[self._slices[seg.name]] = part.ravel()
        return out

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def check(self, values: np.ndarray, what: str = "vector") -> np.ndarray:
        values = np.asarray(values)
        if values.ndim != 1 or values.size != self.size:
            raise StructureError(f"{what} has shape {values.shape}, layout expects ({self.size},)")
        return values

    def lower_bounds(self) -> np.ndarray:
        return np.concatenate([np.full(s.size, s.lower) for s in self.segments]) if self.segments else np.zeros(0)

    def upper_bounds(self) -> np.ndarray:
        return np.concatenate([np.full(s.size, s.upper) for s in self.segments]) if self.segments else np.zeros(0)

    def clip(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.lower_bounds(), self.upper_bounds())

    def contains(self, values: np.ndarray, tol: float = 0.0) -> bool:
        lo, hi = self.lower_bounds(), self.upper_bounds()
        return bool(np.all(values >= lo - tol) and np.all(values <= hi + tol))

    def broadcast(self, per_segment: float | Mapping[str, float] | np.ndarray) -> np.ndarray:
        """Expand a scalar, a per-segment mapping, or a full vector to one value per component."""
        if np.isscalar(per_segment):
            return np.full(self.size, float(per_segment))
        if isinstance(per_segment, Mapping):
            unknown = set(per_segment) - set(self.names)
            if unknown:
                raise StructureError(f"unknown segments {sorted(unknown)}; layout has {self.names}")
            missing = set(self.names) - set(per_segment)
            if missing:
                raise StructureError(f"no value given for segments {sorted(missing)}")
            return np.concatenate([np.full(s.size, float(per_segment[s.name])) for s in self.segments])
        arr = np.asarray(per_segment, dtype=float)
        return self.check(arr, "per-component vector").copy()


@dataclass(frozen=True)
class NudgeVariant:
    """Nudging values used in the homeostatic phase (beta1) and the clamped phase (beta2)."""

    beta1: float
    beta2: float
    name: str = "custom"

    def __post_init__(self):
        if not self.beta1 < self.beta2:
            raise DomainError(f"nudging requires beta1 < beta2, got ({self.beta1}, {self.beta2})")

    @classmethod
    def optimistic(cls, beta: float) -> "NudgeVariant":
        return cls(0.0, beta, "optimistic")

    @classmethod
    def pessimistic(cls, beta: float) -> "NudgeVariant":
        return cls(-beta, 0.0, "pessimistic")

    @classmethod
    def centered(cls, beta: float) -> "NudgeVariant":
        return cls(-beta / 2, beta / 2, "centered")

    @classmethod
    def from_name(cls, name: str, beta: float) -> "NudgeVariant":
        factories = {"optimistic": cls.optimistic, "pessimistic": cls.pessimistic, "centered": cls.centered}
        try:
            return factories[name](beta)
        except KeyError:
            raise DomainError(f"unknown variant {name!r}; expected one of {sorted(factories)}") from None

    @property
    def width(self) -> float:
        return self.beta2 - self.beta1


@dataclass(frozen=True)
class CouplingSpec:
    """Control energy ``U(u, theta) / eps`` tying each parameter to its knob.

    The quadratic form stores one ``eps`` per component. A custom form takes
    ``U`` with its theta-gradient and theta-Hessian diagonal and a scalar eps;
    ``solve_control(theta, g)`` must return u with ``dU/dtheta(u, theta) = g``
    if analytic homeostasis is wanted.
    """

    epsilon: np.ndarray
    form: str = "quadratic"
    U: Callable | None = None
    grad_theta_U: Callable | None = None
    hess_diag_theta_U: Callable | None = None
    solve_control: Callable | None = None

    def __post_init__(self):
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        if not np.all(eps > 0) or not np.all(np.isfinite(eps)):
            raise DomainError("coupling strengths must be finite and > 0")
        object.__setattr__(self, "epsilon", eps)
        if self.form not in ("quadratic", "custom"):
            raise DomainError(f"unknown coupling form {self.form!r}")
        if self.form == "custom":
            if self.U is None or self.grad_theta_U is None:
                raise DomainError("custom coupling needs U and its theta-gradient")
            if eps.size != 1:
                raise DomainError("custom coupling takes a scalar epsilon")

    @classmethod
    def quadratic(cls, epsilon, layout: Layout | None = None) -> "CouplingSpec":
        if layout is not None:
            return cls(layout.broadcast(epsilon))
        return cls(np.atleast_1d(np.asarray(epsilon, dtype=float)))

    def scaled(self, factor: float) -> "CouplingSpec":
        return CouplingSpec(self.epsilon * factor, self.form, self.U, self.grad_theta_U,
                            self.hess_diag_theta_U, self.solve_control)

    def energy(self, u: np.ndarray, theta: np.ndarray) -> float:
        """Coupling term of the global energy, already divided by eps."""
        if self.form == "quadratic":
            d = u - theta
            return float(np.sum(d * d / (2.0 * self.epsilon)))
        return float(self.U(u, theta)) / float(self.epsilon[0])

    def grad_theta(self, u: np.ndarray, theta: np.ndarray) -> np.ndarray:
        if self.form == "quadratic":
            return (theta - u) / self.epsilon
        return np.asarray(self.grad_theta_U(u, theta), dtype=float) / self.epsilon[0]

    def hess_diag_theta(self, u: np.ndarray, theta: np.ndarray) -> np.ndarray:
        if self.form == "quadratic":
            return np.broadcast_to(1.0 / self.epsilon, theta.shape).copy()
        if self.hess_diag_theta_U is None:
            raise DomainError("custom coupling has no theta-Hessian evaluator")
        return np.asarray(self.hess_diag_theta_U(u, theta), dtype=float) / self.epsilon[0]

    def control_for(self, theta: np.ndarray, grad_rest: np.ndarray) -> np.ndarray:
        """Knob value putting theta at a stationary point given the gradient of the remaining energy."""
        if self.form == "quadratic":
            return theta + self.epsilon * grad_rest
        if self.solve_control is None:
            raise DomainError("custom coupling has no control solver")
        return np.asarray(self.solve_control(theta, -self.epsilon[0] * grad_rest), dtype=float)

    def component_epsilon(self, n: int) -> np.ndarray:
        return np.broadcast_to(self.epsilon, (n,)).copy() if self.epsilon.size == 1 else self.epsilon


class EnergyModel(ABC):
    """Physics of a simulated system: an energy E(theta, x, s) and a cost C(s, y).

    ``x`` and ``y`` carry a leading batch axis; the state of a batch is one
    flat vector holding independent replicas and both E and C are batch means.
    Models that set ``exact_relaxation`` are quadratic in every scalar state and
    parameter and provide the curvature evaluators used by coordinate relaxation.
    """

    param_layout: Layout
    exact_relaxation: bool = False
    #: state segments whose entries do not interact with each other inside E + beta C
    separable_state: bool = True
    #: parameter segments whose entries do not interact with each other inside E
    separable_params: bool = True
    #: E has no cross-segment parameter interactions, so segments may relax in parallel
    params_decoupled: bool = True
    #: E + beta C is convex in s for every nudge the model is used with (unique equilibria)
    convex_state: bool = False
    #: E is quadratic in theta jointly and :meth:`hess_theta_energy` returns its Hessian
    block_params: bool = False

    @abstractmethod
    def state_layout(self, x) -> Layout: ...

    @abstractmethod
    def energy(self, theta: np.ndarray, x, s: np.ndarray) -> float: ...

    @abstractmethod
    def cost(self, s: np.ndarray, y) -> float: ...

    @abstractmethod
    def grad_s_energy(self, theta, x, s) -> np.ndarray: ...

    @abstractmethod
    def grad_theta_energy(self, theta, x, s) -> np.ndarray: ...

    @abstractmethod
    def grad_s_cost(self, s, y) -> np.ndarray: ...

    def curv_s_energy(self, theta, x, s) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no state curvature evaluator")

    def curv_s_cost(self, s, y) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no cost curvature evaluator")

    def curv_theta_energy(self, theta, x, s) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no parameter curvature evaluator")

    def hess_theta_energy(self, theta, x, s) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no parameter Hessian evaluator")

    def grad_s_energy_segment(self, theta, x, s, name: str) -> np.ndarray:
        layout = self.state_layout(x)
        return self.grad_s_energy(theta, x, s)[layout.slice(name)]

    def grad_theta_energy_segment(self, theta, x, s, name: str) -> np.ndarray:
        return self.grad_theta_energy(theta, x, s)[self.param_layout.slice(name)]

    def init_state(self, x) -> np.ndarray:
        layout = self.state_layout(x)
        return layout.clip(layout.zeros())

    def predict(self, s: np.ndarray, x) -> np.ndarray:
        """Output part of the state, one row per batch element."""
        raise NotImplementedError

    def check_batch(self, x, y=None):
        pass


class LiftedModel(EnergyModel):
    """Model whose energy absorbs a constant nudge: E' = E + beta0 * C."""

    def __init__(self, base: EnergyModel, beta0: float):
        self.base = base
        self.beta0 = float(beta0)
        self.param_layout = base.param_layout
        self.exact_relaxation = base.exact_relaxation
        self.separable_state = base.separable_state
        self.separable_params = base.separable_params
        self.params_decoupled = base.params_decoupled
        self.block_params = base.block_params
        self.convex_state = base.convex_state

    def __repr__(self):
        return f"LiftedModel({self.base!r}, beta0={self.beta0})"

    def state_layout(self, x):
        return self.base.state_layout(x)

    def energy(self, theta, x, s):
        # lifted energy needs the target; bound via with_target
        raise DomainError("LiftedModel energy depends on y; call energy_xy")

    def energy_xy(self, theta, x, y, s):
        return self.base.energy(theta, x, s) + self.beta0 * self.base.cost(s, y)

    def cost(self, s, y):
        return self.base.cost(s, y)

    def grad_s_energy(self, theta, x, s):
        raise DomainError("LiftedModel gradient depends on y; call grad_s_energy_xy")

    def grad_s_energy_xy(self, theta, x, y, s):
        return self.base.grad_s_energy(theta, x, s) + self.beta0 * self.base.grad_s_cost(s, y)

    def grad_theta_energy(self, theta, x, s):
        return self.base.grad_theta_energy(theta, x, s)

    def grad_s_cost(self, s, y):
        return self.base.grad_s_cost(s, y)

    def curv_s_energy_xy(self, theta, x, y, s):
        return self.base.curv_s_energy(theta, x, s) + self.beta0 * self.base.curv_s_cost(s, y)

    def curv_s_cost(self, s, y):
        return self.base.curv_s_cost(s, y)

    def curv_theta_energy(self, theta, x, s):
        return self.base.curv_theta_energy(theta, x, s)

    def grad_theta_energy_segment(self, theta, x, s, name):
        return self.base.grad_theta_energy_segment(theta, x, s, name)

    def hess_theta_energy(self, theta, x, s):
        return self.base.hess_theta_energy(theta, x, s)

    def init_state(self, x):
        return self.base.init_state(x)

    def predict(self, s, x):
        return self.base.predict(s, x)

    def check_batch(self, x, y=None):
        self.base.check_batch(x, y)


def lift_nudge(model: EnergyModel, beta0: float) -> EnergyModel:
    """Fold a constant nudge ``beta0 * C`` into the energy.

    Running nudges (b1, b2) on ``model`` is the same as running (0, b2 - b1)
    on ``lift_nudge(model, b1)``. Lifting twice adds the offsets.
    """
    if beta0 == 0:
        return model
    if isinstance(model, LiftedModel):
        total = model.beta0 + beta0
        return model.base if total == 0 else LiftedModel(model.base, total)
    return LiftedModel(model, beta0)


def unlift(model: EnergyModel) -> tuple[EnergyModel, float]:
    if isinstance(model, LiftedModel):
        return model.base, model.beta0
    return model, 0.0


# Energy terms below resolve a possibly lifted model to (base, offset) once so
# engines never need to special-case LiftedModel.

def state_energy(model: EnergyModel, theta, x, y, s, beta: float) -> float:
    """E(theta, x, s) + beta * C(s, y)."""
    base, b0 = unlift(model)
    e = base.energy(theta, x, s)
    b = beta + b0
    return e + b * base.cost(s, y) if b != 0 else e


def state_grad(model: EnergyModel, theta, x, y, s, beta: float) -> np.ndarray:
    base, b0 = unlift(model)
    g = base.grad_s_energy(theta, x, s)
    b = beta + b0
    return g + b * base.grad_s_cost(s, y) if b != 0 else g


def state_grad_segment(model: EnergyModel, theta, x, y, s, beta: float, name: str) -> np.ndarray:
    base, b0 = unlift(model)
    g = base.grad_s_energy_segment(theta, x, s, name)
    b = beta + b0
    if b != 0:
        g = g + b * base.grad_s_cost(s, y)[base.state_layout(x).slice(name)]
    return g


def state_curv(model: EnergyModel, theta, x, y, s, beta: float) -> np.ndarray:
    base, b0 = unlift(model)
    h = base.curv_s_energy(theta, x, s)
    b = beta + b0
    return h + b * base.curv_s_cost(s, y) if b != 0 else h


def global_energy(u, theta, s, x, y, coupling: CouplingSpec | None, beta: float, model: EnergyModel,
                  check_domain: bool = False) -> float:
    """U(u, theta)/eps + E(theta, x, s) + beta * C(s, y).

    Pass ``coupling=None`` (and any ``u``) to drop the coupling term, which is
    the energy seen when parameters are frozen.
    """
    theta = model.param_layout.check(theta, "theta")
    layout = model.state_layout(x)
    s = layout.check(s, "state")
    if check_domain and not layout.contains(s):
        raise DomainError("state lies outside its box domain")
    total = state_energy(model, theta, x, y, s, beta)
    if coupling is not None:
        u = model.param_layout.check(u, "control")
        total += coupling.energy(u, theta)
    if not math.isfinite(total):
        raise NumericError(f"global energy is not finite ({total})")
    return float(total)


@dataclass
class RelaxOutcome:
    """Equilibrium found by a relaxation engine plus diagnostics."""

    state: np.ndarray
    params: np.ndarray
    iterations: int
    residual: float
    energy: float
    converged: bool = True
    control: np.ndarray | None = None
    history: list[float] = field(default_factory=list)
