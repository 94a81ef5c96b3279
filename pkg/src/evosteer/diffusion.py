"""Conditional DDPM over continuous actions.

Step indices follow the usual 1-based convention: ``betas[t-1]`` is the
variance added at step ``t`` and ``alpha_bar(0) == 1``. The reverse chain adds
noise with the variance of ``q(x_{t-1} | x_t, x_0)``,
``beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)``.

All samplers take one :class:`RngStream` per trajectory. A trajectory's noise
is drawn from its own stream in a fixed order (initial noise, then one draw
per reverse step with ``t > 1``), so it does not depend on which other
trajectories share the batch. Results are bitwise reproducible for a fixed
batch composition; across different batch sizes they agree to rounding, since
the BLAS may block a matrix product differently.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Adam, Mlp, RngStream

MAGIC = b"EVST"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    posterior_var: np.ndarray = field(repr=False)

    def alpha_bar(self, n: int) -> float:
        """Cumulative product up to step ``n``; ``alpha_bar(0) == 1``."""
        if not 0 <= n <= self.T:
            raise ValueError(f"step {n} outside [0, {self.T}]")
        return 1.0 if n == 0 else float(self.alpha_bars[n - 1])


def make_schedule(T: int = 50, beta_start: float = 1e-4, beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    # variance of q(x_{t-1} | x_t, x_0); zero at t=1, never sampled there
    posterior_var = betas * (1.0 - prev) / (1.0 - alpha_bars)
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas, alpha_bars,
                         posterior_var)


def time_embedding(t, width: int, T: int) -> np.ndarray:
    """Sinusoidal embedding of integer steps ``t`` (scalar or array)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(float(max(T, 2))) * np.arange(half) / max(half, 1)) * math.pi
    ang = t[:, None] * freqs[None, :] * (16.0 / T)
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if width % 2:
        emb = np.concatenate([emb, t[:, None] / T], axis=1)
    return emb


def context_vector(ctx) -> np.ndarray:
    """Accepts a raw vector or anything exposing a ``.vector`` attribute."""
    return np.asarray(getattr(ctx, "vector", ctx), dtype=np.float64)


@dataclass
class DenoiserModel:
    mlp: Mlp
    action_dim: int
    context_dim: int
    emb_dim: int
    schedule: NoiseSchedule

    def __post_init__(self):
        expected = self.action_dim + self.context_dim + self.emb_dim
        if self.mlp.sizes[0] != expected:
            raise ValueError(f"denoiser input width {self.mlp.sizes[0]} != {expected}")
        if self.mlp.sizes[-1] != self.action_dim:
            raise ValueError("denoiser output width must equal action_dim")

    @property
    def T(self) -> int:
        return self.schedule.T

    def _inputs(self, x: np.ndarray, t: np.ndarray, ctx: np.ndarray) -> np.ndarray:
        B = x.shape[0]
        if ctx.ndim == 1:
            ctx = np.broadcast_to(ctx, (B, self.context_dim))
        return np.concatenate([x, ctx, time_embedding(t, self.emb_dim, self.T)], axis=1)

    def predict_noise(self, x, t, ctx) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        c = self.check_context(ctx)
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        return self.mlp.forward(self._inputs(x, t, c))

    def check_context(self, ctx) -> np.ndarray:
        c = context_vector(ctx)
        if c.shape[-1] != self.context_dim:
            raise ValueError(f"context width {c.shape[-1]} != model context_dim {self.context_dim}")
        return c


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 256
    lr: float = 3e-3
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64, 64)
    emb_dim: int = 16
    activation: str = "relu"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0 or self.emb_dim < 1:
            raise ValueError(f"invalid training config {self}")


def _demo_arrays(demos) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(demos, tuple) and len(demos) == 2 and isinstance(demos[0], np.ndarray):
        ctxs, acts = demos
    else:
        demos = list(demos)
        if not demos:
            raise ValueError("no demonstrations")
        ctxs = np.stack([context_vector(c) for c, _ in demos])
        acts = np.stack([np.asarray(a, dtype=np.float64) for _, a in demos])
    ctxs = np.atleast_2d(np.asarray(ctxs, dtype=np.float64))
    acts = np.atleast_2d(np.asarray(acts, dtype=np.float64))
    if acts.shape[0] == 0:
        raise ValueError("no demonstrations")
    if ctxs.shape[0] != acts.shape[0]:
        raise ValueError("context/action count mismatch")
    return ctxs, acts


def train_policy(demos, cfg: TrainConfig, schedule: NoiseSchedule,
                 log_every: int = 0) -> tuple[DenoiserModel, float]:
    """Fit the noise predictor with the standard epsilon-regression loss.

    ``demos`` is either a sequence of ``(context, action)`` pairs or a tuple of
    arrays ``(contexts (N, c), actions (N, d))``. Returns the model and the
    running-average loss over the last 10% of steps.
    """
    ctxs, acts = _demo_arrays(demos)
    N, d = acts.shape
    c = ctxs.shape[1]
    rng = RngStream(cfg.seed, 0xD1FF)
    sizes = (d + c + cfg.emb_dim, *cfg.hidden, d)
    mlp = Mlp.init(sizes, rng, cfg.activation)
    model = DenoiserModel(mlp, d, c, cfg.emb_dim, schedule)
    opt = Adam(mlp.params, lr=cfg.lr)
    sqrt_ab = np.sqrt(schedule.alpha_bars)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bars)
    B = cfg.batch_size
    tail = max(1, cfg.steps // 10)
    recent: list[float] = []
    for step in range(cfg.steps):
        idx = rng.integers(N, B)
        t = rng.integers(schedule.T, B) + 1
        eps = rng.gauss(B * d).reshape(B, d)
        x0 = acts[idx]
        xt = sqrt_ab[t - 1, None] * x0 + sqrt_1mab[t - 1, None] * eps
        inp = model._inputs(xt, t, ctxs[idx])
        err = mlp.forward(inp) - eps
        loss = float(np.mean(err * err))
        gw, gb = mlp.backward(inp, 2.0 * err / err.size)
        # cosine decay to 10% of the base rate
        lr = cfg.lr * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * step / max(cfg.steps, 1))))
        opt.step([g for pair in zip(gw, gb) for g in pair], lr=lr)
        if step >= cfg.steps - tail:
            recent.append(loss)
        if log_every and step % log_every == 0:
            print(f"step {step:6d}  loss {loss:.5f}")
    final = float(np.mean(recent)) if recent else float("nan")
    return model, final


def _noise_block(rngs: Sequence[RngStream], count: int, d: int) -> np.ndarray:
    """``(len(rngs), count, d)`` noise, each row from its own stream."""
    if count == 0:
        return np.zeros((len(rngs), 0, d))
    return np.stack([r.gauss(count * d).reshape(count, d) for r in rngs])


def _reverse(model: DenoiserModel, x: np.ndarray, n: int, ctx: np.ndarray,
             noise: np.ndarray) -> np.ndarray:
    s = model.schedule
    for j, t in enumerate(range(n, 0, -1)):
        beta = s.betas[t - 1]
        eps_hat = model.mlp.forward(model._inputs(x, np.full(x.shape[0], t), ctx))
        x = (x - beta / math.sqrt(1.0 - s.alpha_bars[t - 1]) * eps_hat) / math.sqrt(s.alphas[t - 1])
        if t > 1:
            x = x + math.sqrt(s.posterior_var[t - 1]) * noise[:, j, :]
    return x


def sample_batch(model: DenoiserModel, ctx, rngs: Sequence[RngStream]) -> np.ndarray:
    """One full ancestral sample per stream; returns ``(len(rngs), action_dim)``."""
    c = model.check_context(ctx)
    d, T = model.action_dim, model.T
    noise = _noise_block(rngs, T, d)
    return _reverse(model, noise[:, 0, :], T, c, noise[:, 1:, :])


def sample(model: DenoiserModel, ctx, rng: RngStream) -> np.ndarray:
    return sample_batch(model, ctx, [rng])[0]


def forward_noise(a, n: int, schedule: NoiseSchedule, rng: RngStream) -> np.ndarray:
    """Closed-form jump to step ``n``: ``sqrt(ab_n) a + sqrt(1 - ab_n) eps``."""
    if not 1 <= n <= schedule.T:
        raise ValueError(f"truncation step {n} outside [1, {schedule.T}]")
    a = np.asarray(a, dtype=np.float64)
    return noise_with(a, schedule.alpha_bar(n), rng.gauss(a.size).reshape(a.shape))


def noise_with(a, alpha_bar: float, eps) -> np.ndarray:
    """The forward-noising identity with explicit ``alpha_bar`` and ``eps``."""
    a = np.asarray(a, dtype=np.float64)
    return math.sqrt(alpha_bar) * a + math.sqrt(1.0 - alpha_bar) * np.asarray(eps, dtype=np.float64)


def denoise_batch(model: DenoiserModel, noised: np.ndarray, n: int, ctx,
                  rngs: Sequence[RngStream]) -> np.ndarray:
    if not 1 <= n <= model.T:
        raise ValueError(f"truncation step {n} outside [1, {model.T}]")
    x = np.atleast_2d(np.asarray(noised, dtype=np.float64))
    if x.shape[1] != model.action_dim:
        raise ValueError(f"action width {x.shape[1]} != {model.action_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("noised action is not finite")
    c = model.check_context(ctx)
    noise = _noise_block(rngs, n - 1, model.action_dim)
    return _reverse(model, x, n, c, noise)


def denoise_from(model: DenoiserModel, noised, n: int, ctx, rng: RngStream) -> np.ndarray:
    """Run reverse steps ``n, n-1, ..., 1`` starting from ``noised``."""
    return denoise_batch(model, noised, n, ctx, [rng])[0]


# -- checkpoint container -------------------------------------------------

_ACT_CODES = {"tanh": 0.0, "relu": 1.0, "linear": 2.0}


def write_tensors(buf: io.BufferedIOBase, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def read_tensors(buf: io.BufferedIOBase) -> dict[str, np.ndarray]:
    def take(n: int) -> bytes:
        b = buf.read(n)
        if len(b) != n:
            raise CheckpointError("truncated tensor container")
        return b

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack("<I", take(4))
        name = take(ln).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    return out


def save_checkpoint(model: DenoiserModel, path) -> None:
    s = model.schedule
    tensors: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(model.mlp.weights, model.mlp.biases)):
        tensors[f"w{i}"] = w
        tensors[f"b{i}"] = b
    tensors["activations"] = np.array([_ACT_CODES[a] for a in model.mlp.activations])
    tensors["emb_dim"] = np.array([float(model.emb_dim)])
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", FORMAT_VERSION, model.action_dim, model.context_dim, s.T))
    buf.write(struct.pack("<dd", s.beta_start, s.beta_end))
    write_tensors(buf, tensors)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> DenoiserModel:
    buf = io.BytesIO(Path(path).read_bytes())
    magic = buf.read(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    head = buf.read(16)
    if len(head) != 16:
        raise CheckpointError(f"{path}: truncated header")
    version, action_dim, context_dim, T = struct.unpack("<IIII", head)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    beta_start, beta_end = struct.unpack("<dd", buf.read(16))
    tensors = read_tensors(buf)
    n_layers = sum(1 for k in tensors if k.startswith("w"))
    ws = [tensors[f"w{i}"] for i in range(n_layers)]
    bs = [tensors[f"b{i}"] for i in range(n_layers)]
    codes = {v: k for k, v in _ACT_CODES.items()}
    acts = tuple(codes[float(c)] for c in tensors["activations"])
    sizes = (ws[0].shape[1], *[w.shape[0] for w in ws])
    mlp = Mlp(sizes, ws, bs, acts)
    emb_dim = int(tensors["emb_dim"][0])
    return DenoiserModel(mlp, action_dim, context_dim, emb_dim,
                         make_schedule(T, beta_start, beta_end))
