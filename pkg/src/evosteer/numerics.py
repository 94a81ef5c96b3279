"""Numerical kernels: seeded RNG streams, softmax, a small MLP with manual
backprop, Adam, and diagonal Gaussian-mixture densities.

Everything is float64. Random streams use numpy's Philox counter-based
generator keyed on ``(seed, stream_id)`` so that any worker can reproduce any
stream without coordinating with the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MASK64 = (1 << 64) - 1


class RngStream:
    """Deterministic standard-normal / uniform source for one ``(seed, stream_id)``.

    Two streams with the same key produce the same sequence for the same call
    sequence. Draws are chunk-invariant: ``gauss(3)`` followed by ``gauss(2)``
    yields the same five numbers as ``gauss(5)``.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & MASK64
        self.stream_id = int(stream_id) & MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def gauss(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError(f"gauss needs n >= 1, got {n}")
        return self._gen.standard_normal(n)

    def uniform(self, n: int) -> np.ndarray:
        if n < 1:
            raise ValueError(f"uniform needs n >= 1, got {n}")
        return self._gen.random(n)

    def integers(self, high: int, n: int) -> np.ndarray:
        return self._gen.integers(0, high, size=n)

    @property
    def counter(self) -> int:
        """Philox counter (low word); used for replay accounting."""
        return int(self._gen.bit_generator.state["state"]["counter"][0])


def derive_seed(*path: int) -> int:
    """64-bit FNV-1a hash of an integer path."""
    h = 0xCBF29CE484222325
    for p in path:
        for byte in int(p & MASK64).to_bytes(8, "little"):
            h ^= byte
            h = (h * 0x100000001B3) & MASK64
    return h


def substream(seed: int, *path: int) -> RngStream:
    """Stream whose id hashes an integer path, e.g. (role, generation, member)."""
    return RngStream(seed, derive_seed(*path))


def gauss(rng: RngStream, n: int) -> np.ndarray:
    return rng.gauss(n)


def softmax(scores, tau: float) -> np.ndarray:
    """Tempered softmax ``exp(tau*s_i) / sum_j exp(tau*s_j)``.

    The maximum is subtracted before exponentiating, so adding a constant to
    every score leaves the result unchanged bitwise.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("empty population")
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    z = tau * (s - s.max())
    e = np.exp(z)
    return e / e.sum()


_ACTIVATIONS = ("tanh", "relu", "linear")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (z > 0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class Mlp:
    """Fully connected net. ``weights[l]`` has shape ``(out, in)``.

    ``activations`` has one entry per hidden layer; the output layer is linear.
    """

    sizes: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: tuple[str, ...] = field(default=())

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if len(self.sizes) < 2 or any(s < 1 for s in self.sizes):
            raise ValueError(f"bad layer sizes {self.sizes}")
        n_hidden = len(self.sizes) - 2
        if not self.activations:
            self.activations = ("tanh",) * n_hidden
        self.activations = tuple(self.activations)
        if len(self.activations) != n_hidden:
            raise ValueError("need one activation per hidden layer")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[l + 1], self.sizes[l]) or b.shape != (self.sizes[l + 1],):
                raise ValueError(f"layer {l} parameter shape mismatch")

    @classmethod
    def init(cls, sizes: Sequence[int], rng: RngStream, activation: str = "tanh") -> "Mlp":
        """Xavier-style Gaussian init, zero biases."""
        sizes = tuple(int(s) for s in sizes)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = math.sqrt(2.0 / (fan_in + fan_out))
            ws.append(rng.gauss(fan_in * fan_out).reshape(fan_out, fan_in) * scale)
            bs.append(np.zeros(fan_out))
        return cls(sizes, ws, bs, (activation,) * (len(sizes) - 2))

    @classmethod
    def zeros(cls, sizes: Sequence[int], activation: str = "tanh") -> "Mlp":
        sizes = tuple(int(s) for s in sizes)
        ws = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
        bs = [np.zeros(o) for o in sizes[1:]]
        return cls(sizes, ws, bs, (activation,) * (len(sizes) - 2))

    @property
    def params(self) -> list[np.ndarray]:
        return [p for wb in zip(self.weights, self.biases) for p in wb]

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases], self.activations)

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[-1]} != {self.sizes[0]}")
        return x

    def forward(self, x) -> np.ndarray:
        """Accepts a single vector ``(in,)`` or a batch ``(B, in)``."""
        h = self._check_input(x)
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if l < last:
                h = _act(self.activations[l], h)
        return h

    def backward(self, x, grad_out) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of ``sum(grad_out * forward(x))`` w.r.t. weights and biases.

        Batched inputs accumulate (sum) over the batch.
        """
        x = self._check_input(x)
        g = np.asarray(grad_out, dtype=np.float64)
        if g.shape[-1] != self.sizes[-1] or g.shape[:-1] != x.shape[:-1]:
            raise ValueError(f"grad_out shape {g.shape} does not match output")
        single = x.ndim == 1
        if single:
            x, g = x[None, :], g[None, :]
        last = len(self.weights) - 1
        hs, zs = [x], []
        h = x
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            zs.append(z)
            h = _act(self.activations[l], z) if l < last else z
            hs.append(h)
        gw: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        gb: list[np.ndarray] = [None] * len(self.weights)  # type: ignore[list-item]
        for l in range(last, -1, -1):
            if l < last:
                g = g * _act_grad(self.activations[l], zs[l], hs[l + 1])
            gw[l] = g.T @ hs[l]
            gb[l] = g.sum(axis=0)
            if l > 0:
                g = g @ self.weights[l]
        return gw, gb


def mlp_forward(m: Mlp, x) -> np.ndarray:
    return m.forward(x)


def mlp_backward(m: Mlp, x, grad_out):
    return m.backward(x, grad_out)


class Adam:
    """Plain Adam over a list of arrays, updated in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def gmm_logpdf(means, covs_diagonal, weights, x) -> float | np.ndarray:
    """Log density of a diagonal-covariance Gaussian mixture.

    ``means`` and ``covs_diagonal`` are ``(K, d)``; ``x`` is ``(d,)`` or a batch
    ``(B, d)`` (returns an array then).
    """
    mu = np.atleast_2d(np.asarray(means, dtype=np.float64))
    var = np.atleast_2d(np.asarray(covs_diagonal, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if var.shape != mu.shape:
        var = np.broadcast_to(var, mu.shape)
    if np.any(var <= 0):
        raise ValueError("covariances must be positive")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be nonnegative and sum to 1")
    xx = np.asarray(x, dtype=np.float64)
    single = xx.ndim == 1
    xb = np.atleast_2d(xx)
    d = mu.shape[1]
    diff = xb[:, None, :] - mu[None, :, :]
    quad = np.sum(diff * diff / var[None], axis=-1)
    log_norm = -0.5 * (d * math.log(2 * math.pi) + np.sum(np.log(var), axis=-1))
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    comp = logw[None, :] + log_norm[None, :] - 0.5 * quad
    m = comp.max(axis=1, keepdims=True)
    out = (m + np.log(np.exp(comp - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(out[0]) if single else out
