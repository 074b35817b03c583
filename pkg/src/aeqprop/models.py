"""Concrete energy models: Fourier-feature linear regression and layered Hopfield networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import DomainError, EnergyModel, Layout, Segment, StructureError


def fourier_features(z, n_freq: int) -> np.ndarray:
    """Features (1, sin(pi z), cos(pi z), ..., sin(n pi z), cos(n pi z)).

    Accepts a scalar or an array of points in [-1, 1]; the feature axis is last.
    """
    z = np.asarray(z, dtype=float)
    if np.any(np.abs(z) > 1):
        raise DomainError("fourier features are defined on [-1, 1]")
    k = np.arange(1, n_freq + 1)
    angles = np.pi * z[..., None] * k
    out = np.empty(z.shape + (2 * n_freq + 1,))
    out[..., 0] = 1.0
    out[..., 1::2] = np.sin(angles)
    out[..., 2::2] = np.cos(angles)
    return out


def legendre_eval(z, degree: int) -> np.ndarray:
    """Values L_0(z) .. L_degree(z) by the three-term recurrence, stacked on the last axis."""
    if degree < 0:
        raise DomainError("degree must be >= 0")
    z = np.asarray(z, dtype=float)
    out = np.empty(z.shape + (degree + 1,))
    out[..., 0] = 1.0
    if degree >= 1:
        out[..., 1] = z
    for i in range(1, degree):
        out[..., i + 1] = ((2 * i + 1) * z * out[..., i] - i * out[..., i - 1]) / (i + 1)
    return out


@dataclass(frozen=True)
class LegendreTarget:
    """Random polynomial sum_i w_i L_i(z)."""

    coeffs: tuple[float, ...]
    seed: int | None = None

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, z) -> np.ndarray:
        return target_eval(self, z)


def sample_target(seed: int, degree: int = 10) -> LegendreTarget:
    rng = np.random.default_rng(seed)
    return LegendreTarget(tuple(float(w) for w in rng.standard_normal(degree + 1)), seed)


def target_eval(f: LegendreTarget, z) -> np.ndarray:
    return legendre_eval(z, f.degree) @ np.asarray(f.coeffs)


class LinRegModel(EnergyModel):
    """Scalar-output linear model relaxed by the energy 1/2 (s - theta . phi(x))^2.

    The state holds one scalar per batch element. Parameters are stored in
    three segments (``bias``, ``sin``, ``cos``) so each frequency family can
    get its own coupling strength; :meth:`features` returns columns in that order.
    With ``regularize_state`` the energy gains ``s^2``, which keeps E + beta C
    bounded below for negative nudges down to beta > -3.
    """

    exact_relaxation = True
    separable_state = True
    separable_params = False
    params_decoupled = False
    block_params = True
    convex_state = True

    def __init__(self, n_freq: int = 10, regularize_state: bool = False):
        if n_freq < 0:
            raise DomainError("n_freq must be >= 0")
        self.n_freq = n_freq
        self.regularize_state = regularize_state
        self.param_layout = Layout([Segment("bias", (1,)), Segment("sin", (n_freq,)), Segment("cos", (n_freq,))])
        interleaved = np.arange(2 * n_freq + 1)
        self._perm = np.concatenate([interleaved[:1], interleaved[1::2], interleaved[2::2]])
        self._feature_cache: tuple[object, np.ndarray] | None = None
        self._layouts: dict[int, Layout] = {}

    def __repr__(self):
        return f"LinRegModel(n_freq={self.n_freq}, regularize_state={self.regularize_state})"

    @property
    def n_features(self) -> int:
        return 2 * self.n_freq + 1

    def features(self, x) -> np.ndarray:
        cached = self._feature_cache
        if cached is not None and cached[0] is x:
            return cached[1]
        phi = fourier_features(np.atleast_1d(x), self.n_freq)[:, self._perm]
        self._feature_cache = (x, phi)
        return phi

    def theta_from_features_order(self, theta_interleaved: np.ndarray) -> np.ndarray:
        """Reorder coefficients given in (1, sin1, cos1, sin2, ...) order into the layout order."""
        return np.asarray(theta_interleaved, dtype=float)[self._perm]

    def state_layout(self, x) -> Layout:
        batch = np.atleast_1d(x).shape[0]
        layout = self._layouts.get(batch)
        if layout is None:
            layout = self._layouts[batch] = Layout([Segment("s", (batch,))])
        return layout

    def check_batch(self, x, y=None):
        x = np.atleast_1d(x)
        if x.ndim != 1:
            raise StructureError("linreg inputs are a 1-D batch of scalars")
        if y is not None and np.atleast_1d(y).shape != x.shape:
            raise StructureError("linreg targets must match the input batch")

    def prediction(self, theta, x) -> np.ndarray:
        return self.features(x) @ theta

    def energy(self, theta, x, s):
        r = s - self.prediction(theta, x)
        e = 0.5 * r @ r
        if self.regularize_state:
            e += s @ s
        return float(e) / s.size

    def cost(self, s, y):
        d = s - np.atleast_1d(y)
        return float(0.5 * d @ d) / s.size

    def grad_s_energy(self, theta, x, s):
        g = s - self.prediction(theta, x)
        if self.regularize_state:
            g = g + 2.0 * s
        return g / s.size

    def grad_theta_energy(self, theta, x, s):
        r = s - self.prediction(theta, x)
        return -(self.features(x).T @ r) / s.size

    def grad_s_cost(self, s, y):
        return (s - np.atleast_1d(y)) / s.size

    def curv_s_energy(self, theta, x, s):
        return np.full(s.size, (3.0 if self.regularize_state else 1.0) / s.size)

    def curv_s_cost(self, s, y):
        return np.full(s.size, 1.0 / s.size)

    def curv_theta_energy(self, theta, x, s):
        phi = self.features(x)
        return np.einsum("bi,bi->i", phi, phi) / s.size

    def hess_theta_energy(self, theta, x, s):
        phi = self.features(x)
        return phi.T @ phi / s.size

    def free_state(self, theta, x) -> np.ndarray:
        """Closed-form minimizer of E over s."""
        p = self.prediction(theta, x)
        return p / 3.0 if self.regularize_state else p

    def loss_grad(self, theta, x, y) -> np.ndarray:
        """Closed-form gradient of the batch-mean loss C(s(theta, x), y)."""
        phi = self.features(x)
        scale = 1.0 / 3.0 if self.regularize_state else 1.0
        r = scale * (phi @ theta) - np.atleast_1d(y)
        return scale * (phi.T @ r) / phi.shape[0]

    def predict(self, s, x):
        return s[:, None]


# Hopfield-like networks ----------------------------------------------------


@dataclass(frozen=True)
class Dense:
    """Interaction -s_k . (s_{k-1} @ w) with w of shape (fan_in, fan_out) over flattened layers."""


@dataclass(frozen=True)
class Conv:
    """Interaction -s_k . pool(w * s_{k-1}) with a valid (unpadded) convolution and average pooling."""

    kernel: int = 5
    pool: int = 2


@dataclass(frozen=True)
class LayerSpec:
    shape: tuple[int, ...]
    lower: float = 0.0
    upper: float = 1.0


def _conv_forward(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Valid cross-correlation: x (B, C, H, W), w (O, C, k, k) -> (B, O, H-k+1, W-k+1)."""
    k = w.shape[-1]
    patches = sliding_window_view(x, (k, k), axis=(2, 3))  # B, C, Ho, Wo, k, k
    return np.einsum("bchwij,ocij->bohw", patches, w, optimize=True)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    """d/dw of sum(g * conv(w, x)) -> (O, C, k, k)."""
    patches = sliding_window_view(x, (k, k), axis=(2, 3))
    return np.einsum("bchwij,bohw->ocij", patches, g, optimize=True)


def _conv_input_grad(w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """d/dx of sum(g * conv(w, x)) -> (B, C, H, W): full convolution with the flipped kernel."""
    k = w.shape[-1]
    padded = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    patches = sliding_window_view(padded, (k, k), axis=(2, 3))  # B, O, H, W, k, k
    return np.einsum("bohwij,ocij->bchw", patches, w[:, :, ::-1, ::-1], optimize=True)


def _avg_pool(z: np.ndarray, p: int) -> np.ndarray:
    b, c, h, w = z.shape
    return z.reshape(b, c, h // p, p, w // p, p).mean(axis=(3, 5))


def _avg_pool_adjoint(z: np.ndarray, p: int) -> np.ndarray:
    return np.repeat(np.repeat(z, p, axis=2), p, axis=3) / (p * p)


class HopfieldModel(EnergyModel):
    """Layered Hopfield-like energy with dense or convolutional interactions.

        E = sum_k 1/2 |s_k|^2 + sum_k E_k(w_k, s_{k-1}, s_k) - sum_k b_k . s_k,   s_0 = x

    Dense interactions use ``E_k = -s_{k-1}^T w_k s_k``; convolutional ones use
    ``E_k = -s_k . pool(w_k * s_{k-1})``. Dense biases match their layer;
    convolutional biases are per channel. The cost is ``|s_N - y|^2``.
    Energies and costs are batch means.
    """

    exact_relaxation = True
    separable_state = True
    separable_params = True
    params_decoupled = True

    def __init__(self, input_shape, layers, interactions):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = [l if isinstance(l, LayerSpec) else LayerSpec(*l) for l in layers]
        self.interactions = list(interactions)
        if len(self.layers) != len(self.interactions) or not self.layers:
            raise StructureError("need one interaction per layer and at least one layer")
        segments = []
        shapes = [self.input_shape] + [tuple(l.shape) for l in self.layers]
        for k, inter in enumerate(self.interactions, start=1):
            src, dst = shapes[k - 1], shapes[k]
            if isinstance(inter, Dense):
                segments.append(Segment(f"w{k}", (int(np.prod(src)), int(np.prod(dst)))))
                segments.append(Segment(f"b{k}", (int(np.prod(dst)),)))
            elif isinstance(inter, Conv):
                if len(src) != 3 or len(dst) != 3:
                    raise StructureError(f"conv interaction {k} needs (C, H, W) layers, got {src} -> {dst}")
                conv_h = src[1] - inter.kernel + 1
                conv_w = src[2] - inter.kernel + 1
                if conv_h % inter.pool or conv_w % inter.pool or (conv_h // inter.pool, conv_w // inter.pool) != dst[1:]:
                    raise StructureError(
                        f"conv interaction {k}: {src} with kernel {inter.kernel} and pool {inter.pool} "
                        f"does not produce spatial shape {dst[1:]}")
                segments.append(Segment(f"w{k}", (dst[0], src[0], inter.kernel, inter.kernel)))
                segments.append(Segment(f"b{k}", (dst[0],)))
            else:
                raise StructureError(f"unknown interaction {inter!r}")
        self.param_layout = Layout(segments)
        self._shapes = shapes
        self._layout_cache: dict[int, Layout] = {}

    def __repr__(self):
        sizes = "-".join("x".join(map(str, s)) for s in self._shapes)
        return f"HopfieldModel({sizes})"

    @classmethod
    def dense(cls, sizes, hidden_box=(0.0, 1.0), output_box=(-1.0, 2.0)) -> "HopfieldModel":
        """Dense network; ``sizes`` starts with the input size and ends with the output size."""
        layers = [LayerSpec((n,), *hidden_box) for n in sizes[1:-1]] + [LayerSpec((sizes[-1],), *output_box)]
        return cls((sizes[0],), layers, [Dense() for _ in layers])

    @classmethod
    def conv_mnist(cls) -> "HopfieldModel":
        """1x28x28 - 32x12x12 - 64x4x4 - 10 network with two 5x5 convolutions and 2x2 pooling."""
        return cls((1, 28, 28),
                   [LayerSpec((32, 12, 12)), LayerSpec((64, 4, 4)), LayerSpec((10,), -1.0, 2.0)],
                   [Conv(5, 2), Conv(5, 2), Dense()])

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def state_layout(self, x) -> Layout:
        batch = np.shape(x)[0]
        layout = self._layout_cache.get(batch)
        if layout is None:
            layout = Layout([Segment(f"s{k}", (batch,) + tuple(l.shape), l.lower, l.upper)
                             for k, l in enumerate(self.layers, start=1)])
            self._layout_cache[batch] = layout
        return layout

    def check_batch(self, x, y=None):
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise StructureError(f"inputs have shape {x.shape[1:]}, model expects {self.input_shape}")
        if y is not None:
            y = np.asarray(y)
            if y.shape != (x.shape[0], int(np.prod(self.layers[-1].shape))):
                raise StructureError(f"targets have shape {y.shape}")

    # helpers -------------------------------------------------------------

    def _layers(self, x, s):
        layout = self.state_layout(x)
        return [np.asarray(x, dtype=float)] + [layout.view(s, f"s{k}") for k in range(1, self.n_layers + 1)]

    def _params(self, theta):
        return self.param_layout.split(theta)

    def _drive_up(self, k, w, below):
        """Contribution of layer k-1 to the negative gradient of layer k."""
        inter = self.interactions[k - 1]
        batch = below.shape[0]
        if isinstance(inter, Dense):
            return (below.reshape(batch, -1) @ w).reshape((batch,) + tuple(self.layers[k - 1].shape))
        return _avg_pool(_conv_forward(w, below), inter.pool)

    def _drive_down(self, k, w, above):
        """Contribution of layer k to the negative gradient of layer k-1."""
        inter = self.interactions[k - 1]
        batch = above.shape[0]
        if isinstance(inter, Dense):
            return (above.reshape(batch, -1) @ w.T).reshape((batch,) + self._shapes[k - 1])
        return _conv_input_grad(w, _avg_pool_adjoint(above, inter.pool))

    def _bias_field(self, k, b, like):
        if isinstance(self.interactions[k - 1], Conv):
            return b[None, :, None, None]
        return b.reshape((1,) + like.shape[1:])

    def interaction_energy(self, k, w, below, above) -> float:
        """Sum over the batch of E_k(w, s_{k-1}, s_k)."""
        return -float(np.sum(above * self._drive_up(k, w, below)))

    # EnergyModel ---------------------------------------------------------

    def energy(self, theta, x, s):
        layers = self._layers(x, s)
        params = self._params(theta)
        batch = layers[0].shape[0]
        total = 0.5 * float(s @ s)
        for k in range(1, self.n_layers + 1):
            total += self.interaction_energy(k, params[f"w{k}"], layers[k - 1], layers[k])
            total -= float(np.sum(self._bias_field(k, params[f"b{k}"], layers[k]) * layers[k]))
        return total / batch

    def cost(self, s, y):
        layout_out = self.state_layout_output(s, y)
        d = layout_out - np.asarray(y, dtype=float)
        return float(np.sum(d * d)) / d.shape[0]

    def state_layout_output(self, s, y):
        batch = np.shape(y)[0]
        n_out = int(np.prod(self.layers[-1].shape))
        return s[s.size - batch * n_out:].reshape(batch, n_out)

    def grad_s_energy_segment(self, theta, x, s, name):
        k = int(name[1:])
        layers = self._layers(x, s)
        params = self._params(theta)
        batch = layers[0].shape[0]
        g = layers[k] - self._drive_up(k, params[f"w{k}"], layers[k - 1])
        g = g - self._bias_field(k, params[f"b{k}"], layers[k])
        if k < self.n_layers:
            g = g - self._drive_down(k + 1, params[f"w{k + 1}"], layers[k + 1])
        return g.ravel() / batch

    def grad_s_energy(self, theta, x, s):
        return np.concatenate([self.grad_s_energy_segment(theta, x, s, f"s{k}")
                               for k in range(1, self.n_layers + 1)])

    def grad_theta_energy_segment(self, theta, x, s, name):
        layers = self._layers(x, s)
        k = int(name[1:])
        below, above = layers[k - 1], layers[k]
        batch = below.shape[0]
        inter = self.interactions[k - 1]
        if name[0] == "b":
            if isinstance(inter, Conv):
                return -above.sum(axis=(0, 2, 3)) / batch
            return -above.reshape(batch, -1).sum(axis=0) / batch
        if isinstance(inter, Dense):
            g = -(below.reshape(batch, -1).T @ above.reshape(batch, -1))
        else:
            g = -_conv_weight_grad(below, _avg_pool_adjoint(above, inter.pool), inter.kernel)
        return g.ravel() / batch

    def grad_theta_energy(self, theta, x, s):
        return np.concatenate([self.grad_theta_energy_segment(theta, x, s, seg.name)
                               for seg in self.param_layout.segments])

    def grad_s_cost(self, s, y):
        y = np.asarray(y, dtype=float)
        g = np.zeros_like(s)
        out = self.state_layout_output(s, y)
        g[s.size - out.size:] = (2.0 * (out - y)).ravel() / y.shape[0]
        return g

    def curv_s_energy(self, theta, x, s):
        return np.full(s.size, 1.0 / np.shape(x)[0])

    def curv_s_cost(self, s, y):
        h = np.zeros(s.size)
        batch = np.shape(y)[0]
        h[s.size - np.size(y):] = 2.0 / batch
        return h

    def curv_theta_energy(self, theta, x, s):
        return np.zeros(theta.size)

    def predict(self, s, x):
        layout = self.state_layout(x)
        out = layout.view(s, f"s{self.n_layers}")
        return out.reshape(out.shape[0], -1)

    def fans(self, k: int) -> tuple[int, int]:
        w_shape = self.param_layout.segment(f"w{k}").shape
        if isinstance(self.interactions[k - 1], Dense):
            return w_shape[0], w_shape[1]
        o, c, kh, kw = w_shape
        return c * kh * kw, o * kh * kw


def init_params(model: HopfieldModel, gains, seed: int) -> np.ndarray:
    """Half-Xavier-uniform dense weights, half-Kaiming-normal conv weights, zero biases."""
    gains = list(gains)
    if len(gains) != model.n_layers:
        raise StructureError(f"need {model.n_layers} gains, got {len(gains)}")
    rng = np.random.default_rng(seed)
    parts = {}
    for k, (inter, alpha) in enumerate(zip(model.interactions, gains), start=1):
        fan_in, fan_out = model.fans(k)
        shape = model.param_layout.segment(f"w{k}").shape
        if isinstance(inter, Dense):
            c = alpha / 2 * np.sqrt(6.0 / (fan_in + fan_out))
            parts[f"w{k}"] = rng.uniform(-c, c, size=shape)
        else:
            c = alpha / 2 * np.sqrt(1.0 / fan_in)
            parts[f"w{k}"] = rng.normal(0.0, c, size=shape)
        parts[f"b{k}"] = np.zeros(model.param_layout.segment(f"b{k}").shape)
    return model.param_layout.join(parts)
