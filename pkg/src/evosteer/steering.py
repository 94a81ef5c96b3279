"""Evolutionary diffusion steering.

One call to :func:`steer` runs::

    A0 = M policy samples
    repeat K times: score A, draw M elites i.i.d. from softmax(tau * scores),
                    noise each elite to step n and denoise it back
    return argmax of the final population

Every member of every generation owns a random stream addressed by
``(seed, role, generation, member)``, so results do not depend on evaluation
order or worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffusion import DenoiserModel, denoise_batch, noise_with, sample_batch
from .numerics import RngStream, softmax, substream
from .reward_dsl import EvalError, EvalScope, RewardProgram, evaluate

# substream roles
PROPOSE, SELECT, MUTATE = 1, 2, 3

ScopeFactory = Callable[[np.ndarray], EvalScope]


@dataclass(frozen=True)
class SteeringConfig:
    M: int = 32
    K: int = 10
    tau: float = 5.0
    n: int = 10
    seed: int = 0
    track_incumbent: bool = False
    keep_populations: bool = False
    workers: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"population size must be >= 1, got {self.M}")
        if self.K < 0:
            raise ValueError(f"K must be >= 0, got {self.K}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.n < 1:
            raise ValueError(f"truncation depth must be >= 1, got {self.n}")


@dataclass
class Population:
    members: np.ndarray
    generation: int = 0
    scores: np.ndarray | None = None
    parents: np.ndarray | None = None  # index into the previous generation

    @property
    def size(self) -> int:
        return self.members.shape[0]

    def best_index(self) -> int:
        if self.scores is None:
            raise ValueError("population is unscored")
        # np.argmax returns the first maximum: lowest index wins ties
        return int(np.argmax(self.scores))


@dataclass
class SteeringResult:
    action: np.ndarray
    score: float
    best_trace: list[float]
    mean_trace: list[float]
    initial: np.ndarray
    seed: int
    populations: list[Population] | None = None
    incumbent: tuple[np.ndarray, float] | None = None
    draws: dict[str, int] = field(default_factory=dict)


def _check_model_n(model: DenoiserModel, n: int) -> None:
    if not 1 <= n <= model.T:
        raise ValueError(f"truncation depth {n} outside [1, {model.T}]")


def propose(model: DenoiserModel, ctx, M: int, seed: int) -> Population:
    if M < 1:
        raise ValueError(f"population size must be >= 1, got {M}")
    rngs = [substream(seed, PROPOSE, 0, i) for i in range(M)]
    return Population(sample_batch(model, ctx, rngs), generation=0)


def _scope_factory(ctx, scope: ScopeFactory | None) -> ScopeFactory:
    if scope is not None:
        return scope
    if hasattr(ctx, "scope"):
        return ctx.scope
    raise ValueError("no scope factory: pass one or use a context with .scope()")


def score(pop: Population, prog: RewardProgram, scope: ScopeFactory,
          workers: int = 1) -> Population:
    """Fill ``pop.scores`` by index; members are not modified."""

    def one(i: int) -> float:
        try:
            return evaluate(prog, scope(pop.members[i]))
        except EvalError as exc:
            raise EvalError(f"member {i}: {exc}") from exc

    idx = range(pop.size)
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            vals = list(ex.map(one, idx))
    else:
        vals = [one(i) for i in idx]
    pop.scores = np.array(vals, dtype=np.float64)
    return pop


def select_elites(pop: Population, tau: float, rng: RngStream) -> np.ndarray:
    """Indices of M i.i.d. draws from ``softmax(tau * scores)``."""
    if pop.scores is None:
        raise ValueError("cannot select from an unscored population")
    q = softmax(pop.scores, tau)
    cdf = np.cumsum(q)
    u = rng.uniform(pop.size) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), pop.size - 1)


def mutate(elites: np.ndarray, model: DenoiserModel, ctx, n: int, seed: int,
           generation: int) -> Population:
    """Truncated diffuse/denoise of every elite into generation ``generation``."""
    _check_model_n(model, n)
    elites = np.atleast_2d(elites)
    if elites.shape[0] == 0:
        raise ValueError("no elites to mutate")
    rngs = [substream(seed, MUTATE, generation, i) for i in range(elites.shape[0])]
    ab = model.schedule.alpha_bar(n)
    eps = np.stack([r.gauss(model.action_dim) for r in rngs])
    noised = noise_with(elites, ab, eps)
    return Population(denoise_batch(model, noised, n, ctx, rngs), generation=generation)


def steer(model: DenoiserModel, ctx, prog: RewardProgram, cfg: SteeringConfig,
          scope: ScopeFactory | None = None) -> SteeringResult:
    _check_model_n(model, cfg.n)
    scope = _scope_factory(ctx, scope)
    pop = score(propose(model, ctx, cfg.M, cfg.seed), prog, scope, cfg.workers)
    initial = pop.members.copy()
    best_trace = [float(pop.scores.max())]
    mean_trace = [float(pop.scores.mean())]
    kept = [pop] if cfg.keep_populations else None
    inc_i = pop.best_index()
    incumbent = (pop.members[inc_i].copy(), float(pop.scores[inc_i]))
    for k in range(1, cfg.K + 1):
        idx = select_elites(pop, cfg.tau, substream(cfg.seed, SELECT, k))
        nxt = mutate(pop.members[idx], model, ctx, cfg.n, cfg.seed, k)
        nxt.parents = idx
        pop = score(nxt, prog, scope, cfg.workers)
        if not np.all(np.isfinite(pop.members)):
            raise FloatingPointError(f"non-finite member in generation {k}")
        best_trace.append(float(pop.scores.max()))
        mean_trace.append(float(pop.scores.mean()))
        if kept is not None:
            kept.append(pop)
        b = pop.best_index()
        if pop.scores[b] > incumbent[1]:
            incumbent = (pop.members[b].copy(), float(pop.scores[b]))
    b = pop.best_index()
    d = model.action_dim
    draws = {
        "propose": cfg.M * model.T * d,
        "select": cfg.K * cfg.M,
        "mutate": cfg.K * cfg.M * cfg.n * d,
    }
    return SteeringResult(
        action=pop.members[b].copy(),
        score=float(pop.scores[b]),
        best_trace=best_trace,
        mean_trace=mean_trace,
        initial=initial,
        seed=cfg.seed,
        populations=kept,
        incumbent=incumbent if cfg.track_incumbent else None,
        draws=draws,
    )
