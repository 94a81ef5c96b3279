"""Closed-loop episodes: reason a reward, steer, execute, reflect, and retry.

A round that the critic judges unsuccessful restarts from steering with a
fresh seed, using the critic's revised reward when it supplied one. The
first proposal of round 1's initial population is reported as ``a0``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .diffusion import DenoiserModel
from .envsim import Environment, EpisodeOutcome, execute
from .numerics import derive_seed
from .reward_dsl import RewardProgram
from .steering import SteeringConfig, SteeringResult, steer
from .verifier import (Critic, CriticBackend, CriticError, ReflectionRecord, make_critic,
                       reason_objective, reflect)

TRACE_FORMAT_VERSION = 1
STATUSES = ("success", "budget_exhausted", "aborted_error", "accepted_unsuccessful")
_ROUND_SALT = 0x52D


@dataclass(frozen=True)
class EpisodeConfig:
    rounds: int = 3
    steering: SteeringConfig = field(default_factory=SteeringConfig)
    critic: CriticBackend = field(default_factory=CriticBackend)
    env_kind: str = "two_goal"
    seed: int = 0
    target: str | None = None

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("an episode needs at least one round")


@dataclass
class RoundRecord:
    program: RewardProgram
    steer_seed: int
    result: SteeringResult
    outcome: EpisodeOutcome
    reflection: ReflectionRecord


@dataclass
class EpisodeTrace:
    rounds: list[RoundRecord]
    status: str
    target: str
    a0: np.ndarray | None = None
    error: str | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def round_count(self) -> int:
        return len(self.rounds)

    @property
    def final(self) -> EpisodeOutcome | None:
        return self.rounds[-1].outcome if self.rounds else None

    def records(self, **extra) -> list[dict]:
        """One JSON-ready dict per round."""
        out = []
        for r, rec in enumerate(self.rounds):
            o = rec.outcome
            out.append({
                **extra,
                "round": r + 1,
                "target": self.target,
                "steer_seed": rec.steer_seed,
                "program": rec.program.text,
                "best_score": rec.result.score,
                "best_trace": rec.result.best_trace,
                "action": [float(x) for x in o.action],
                "a0": [float(x) for x in self.a0],
                "success": o.success,
                "aligned": o.aligned,
                "distance": o.distance,
                "out_of_bounds": o.out_of_bounds,
                "verdict": rec.reflection.success,
                "revised_program": (rec.reflection.revised_program.text
                                    if rec.reflection.revised_program else None),
                "status": self.status if r == len(self.rounds) - 1 else "continue",
            })
        if not self.rounds:
            out.append({**extra, "round": 0, "target": self.target, "status": self.status,
                        "error": self.error})
        return out


def round_seed(seed: int, r: int) -> int:
    return derive_seed(seed, _ROUND_SALT, r)


def run_episode(cfg: EpisodeConfig, model: DenoiserModel, env: Environment,
                critic: Critic | None = None) -> EpisodeTrace:
    critic = critic or make_critic(cfg.critic)
    backend = cfg.critic if cfg.critic.kind == "remote" else None
    ctx = env.context(cfg.target)
    target = ctx.instruction.target
    history: list[dict] = []
    rounds: list[RoundRecord] = []
    a0 = None
    try:
        program = reason_objective(ctx, critic, history, backend)
    except CriticError as exc:
        return EpisodeTrace([], "aborted_error", target, None, f"{type(exc).__name__}: {exc}", history)
    status = "budget_exhausted"
    for r in range(cfg.rounds):
        seed = round_seed(cfg.seed, r)
        res = steer(model, ctx, program, replace(cfg.steering, seed=seed))
        if a0 is None:
            a0 = res.initial[0].copy()
        outcome = execute(ctx, res.action)
        try:
            rec = reflect(a0, res.action, outcome.post_context, history, program, critic, backend)
        except CriticError as exc:
            return EpisodeTrace(rounds, "aborted_error", target, a0,
                                f"{type(exc).__name__}: {exc}", history)
        rounds.append(RoundRecord(program, seed, res, outcome, rec))
        if rec.success:
            status = "success" if outcome.success else "accepted_unsuccessful"
            break
        if rec.revised_program is not None:
            program = rec.revised_program
    if status == "budget_exhausted" and rounds and rounds[-1].outcome.success:
        status = "success"
    return EpisodeTrace(rounds, status, target, a0, None, history)


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
