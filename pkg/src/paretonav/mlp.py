"""Dense networks with analytic backprop and spectral normalization.

Fixed architecture (affine layers + tanh/linear activations) with
hand-written forward, backward, Jacobian, and power-iteration spectral
normalization. No autodiff framework: every gradient path here is
validated against finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(Exception):
    """Input length does not match the first layer."""


class Layer:
    """One affine layer y = act(W x + b) with a spectral cap."""

    def __init__(self, W: np.ndarray, b: np.ndarray, act: str, cap: float, u: np.ndarray):
        if act not in ("tanh", "linear"):
            raise ValueError(f"unknown activation {act!r}")
        self.W = np.asarray(W, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.act = act
        self.cap = float(cap)
        self.u = np.asarray(u, dtype=float)  # persistent power-iteration vector

    def copy(self) -> "Layer":
        return Layer(self.W.copy(), self.b.copy(), self.act, self.cap, self.u.copy())


def _act(pre: np.ndarray, act: str) -> np.ndarray:
    return np.tanh(pre) if act == "tanh" else pre


def _act_prime_from_out(out: np.ndarray, act: str) -> np.ndarray:
    # tanh'(x) = 1 - tanh(x)^2, recoverable from the activation output
    return 1.0 - out * out if act == "tanh" else np.ones_like(out)


class Mlp:
    """Sequence of layers; supports empty (pure passthrough) configs."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    @classmethod
    def create(
        cls,
        sizes: list[int],
        rng: np.random.Generator,
        hidden_act: str = "tanh",
        cap: float = 10.0,
    ) -> "Mlp":
        """Glorot-initialized net; last layer linear, the rest hidden_act."""
        layers = []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = sizes[i], sizes[i + 1]
            scale = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-scale, scale, size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            act = "linear" if i == len(sizes) - 2 else hidden_act
            u = rng.normal(size=fan_out)
            u /= np.linalg.norm(u)
            layers.append(Layer(W, b, act, cap, u))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1] if self.layers else -1

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0] if self.layers else -1

    def copy(self) -> "Mlp":
        return Mlp([l.copy() for l in self.layers])

    def lipschitz_cert(self) -> float:
        """Product of layer caps (activations are 1-Lipschitz)."""
        out = 1.0
        for l in self.layers:
            out *= l.cap
        return out

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Apply the net to x of shape (d,) or (B, d).

        With want_cache=True returns (y, cache) where cache holds the
        per-layer inputs and outputs needed by backward().
        """
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if self.layers and h.shape[1] != self.in_dim:
            raise ShapeMismatch(f"input width {h.shape[1]}, expected {self.in_dim}")
        cache = []
        for l in self.layers:
            pre = h @ l.W.T + l.b
            out = _act(pre, l.act)
            cache.append((h, out))
            h = out
        y = h[0] if single else h
        if want_cache:
            return y, cache
        return y

    def backward(self, cache, dy: np.ndarray):
        """Backprop dy = dL/dy (B, out) through the cached forward pass.

        Returns (grads, dx) with grads a list of (dW, db) per layer and dx
        the gradient w.r.t. the input batch.
        """
        g = np.asarray(dy, dtype=float)
        if g.ndim == 1:
            g = g[None, :]
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            l = self.layers[i]
            h_in, out = cache[i]
            g = g * _act_prime_from_out(out, l.act)
            grads[i] = (g.T @ h_in, g.sum(axis=0))
            g = g @ l.W
        return grads, g

    def jacobian(self, z: np.ndarray) -> np.ndarray:
        """Exact Jacobian dy/dz at a single input, shape (out, in)."""
        z = np.asarray(z, dtype=float).reshape(-1)
        if not self.layers:
            return np.eye(len(z))
        J = np.eye(self.in_dim)
        h = z
        for l in self.layers:
            pre = l.W @ h + l.b
            out = _act(pre, l.act)
            J = l.W @ J
            if l.act == "tanh":
                J = (1.0 - out * out)[:, None] * J
            h = out
        return J

    def zero_grads(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(np.zeros_like(l.W), np.zeros_like(l.b)) for l in self.layers]


def power_iteration(W: np.ndarray, u: np.ndarray, n_iters: int) -> tuple[float, np.ndarray]:
    """Estimate the top singular value of W; returns (sigma_hat, new_u)."""
    u = np.asarray(u, dtype=float).copy()
    v = None
    for _ in range(max(n_iters, 1)):
        v = W.T @ u
        v /= np.linalg.norm(v) + 1e-30
        u = W @ v
        u /= np.linalg.norm(u) + 1e-30
    sigma = float(u @ (W @ v))
    return sigma, u


def spectral_normalize(mlp: Mlp, n_power_iters: int = 1) -> list[float]:
    """Scale each weight matrix by min(1, cap/sigma_hat), in place.

    Persistent power vectors are updated so one iteration per training
    step tracks the top singular direction. Returns the per-layer
    post-scaling estimates.
    """
    if n_power_iters < 1:
        raise ValueError("n_power_iters must be >= 1")
    sigmas = []
    for l in mlp.layers:
        sigma, u = power_iteration(l.W, l.u, n_power_iters)
        l.u = u
        if sigma > l.cap:
            l.W *= l.cap / sigma
            sigma = l.cap
        sigmas.append(sigma)
    return sigmas


def mlp_state(mlp: Mlp, prefix: str) -> dict[str, np.ndarray]:
    """Flatten a net into named arrays for npz serialization."""
    out: dict[str, np.ndarray] = {f"{prefix}.n": np.array(len(mlp.layers))}
    for i, l in enumerate(mlp.layers):
        out[f"{prefix}.W{i}"] = l.W
        out[f"{prefix}.b{i}"] = l.b
        out[f"{prefix}.u{i}"] = l.u
        out[f"{prefix}.cap{i}"] = np.array(l.cap)
        out[f"{prefix}.act{i}"] = np.array(l.act)
    return out


def mlp_from_state(state, prefix: str) -> Mlp:
    n = int(state[f"{prefix}.n"])
    layers = []
    for i in range(n):
        layers.append(
            Layer(
                state[f"{prefix}.W{i}"],
                state[f"{prefix}.b{i}"],
                str(state[f"{prefix}.act{i}"]),
                float(state[f"{prefix}.cap{i}"]),
                state[f"{prefix}.u{i}"],
            )
        )
    return Mlp(layers)
