"""Reward reasoning and post-execution reflection through a critic backend.

Both backends speak the same JSON payloads. The stub answers them locally
from scene geometry; the remote backend POSTs them to ``/objective`` and
``/reflect`` on an HTTP critic service.

Every request is rendered as four labeled stages (goal confirmation, scenario
understanding, embodied augmentation, objective generation) and carries the
exchange history of the episode so far.
"""

from __future__ import annotations

import json
import logging
import os
import socket
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Protocol

import numpy as np

from .envsim import TaskContext, keypoints, target_from_text
from .reward_dsl import DslError, EvalScope, RewardProgram, evaluate, parse, validate

log = logging.getLogger(__name__)

STAGES = (
    "steering goal confirmation",
    "scenario understanding",
    "embodied augmentation",
    "objective generation",
)
MAX_REPROMPTS = 2
TOKEN_ENV = "EVOSTEER_CRITIC_TOKEN"


class CriticError(RuntimeError):
    """Base for every critic failure the episode driver turns into an abort."""


class CriticTimeout(CriticError):
    pass


class CriticHTTPError(CriticError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"critic returned HTTP {status}: {body[:200]}")
        self.status = status


class CriticUnavailable(CriticError):
    pass


class CriticProtocolError(CriticError):
    pass


class CriticUnparseable(CriticProtocolError):
    """The service answered 200 with a body that is not a JSON object."""

    def __init__(self, message: str, text: str):
        super().__init__(message)
        self.text = text


class CriticParseError(CriticError):
    def __init__(self, message: str, last_text: str):
        super().__init__(f"{message}; last response: {last_text!r}")
        self.last_text = last_text


@dataclass(frozen=True)
class CriticBackend:
    kind: str = "stub"
    endpoint: str | None = None
    timeout: float = 30.0
    temperature: float = 0.2
    max_tokens: int = 1000
    # stub only: answer the first objective request with a wrong goal
    wrong_first: bool = False
    success_radius: float = 0.15

    def __post_init__(self):
        if self.kind not in ("stub", "remote"):
            raise ValueError(f"unknown critic kind {self.kind!r}")
        if self.timeout <= 0:
            raise ValueError("critic timeout must be positive")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote critic needs an endpoint")


def _pt(v) -> list[float]:
    return [float(x) for x in np.asarray(v).ravel()]


@dataclass(frozen=True)
class SteeringRequest:
    instruction: str
    observation: list[float]
    keypoints: dict[str, list[float]]
    history: tuple[dict, ...] = ()
    stages: tuple[str, ...] = STAGES

    def __post_init__(self):
        if not self.instruction.strip():
            raise ValueError("empty instruction")
        for name, p in self.keypoints.items():
            if not np.all(np.isfinite(p)):
                raise ValueError(f"keypoint {name!r} is not finite")

    def render(self) -> str:
        kp = ", ".join(f"{k}=({v[0]:.3f}, {v[1]:.3f})" for k, v in self.keypoints.items())
        obs = ", ".join(f"{x:.3f}" for x in self.observation)
        body = {
            STAGES[0]: f"Instruction: {self.instruction}\nRestate the goal and confirm it.",
            STAGES[1]: f"Observation: [{obs}]\nIdentify the candidate action modes.",
            STAGES[2]: f"Keypoints: {kp}",
            STAGES[3]: "Write one reward expression over `action` and the keypoint names; "
                       "higher is better.",
        }
        parts = [f"## {i + 1}. {s.title()}\n{body.get(s, '')}" for i, s in enumerate(self.stages)]
        if self.history:
            parts.append(f"## History\n{json.dumps(list(self.history), sort_keys=True)}")
        return "\n\n".join(parts)

    def to_wire(self, backend: CriticBackend | None = None) -> dict:
        msg = {
            "instruction": self.instruction,
            "observation": list(self.observation),
            "keypoints": dict(self.keypoints),
            "stages": list(self.stages),
            "history": list(self.history),
            "prompt": self.render(),
        }
        if backend is not None:
            msg["decoding"] = {"temperature": backend.temperature, "max_tokens": backend.max_tokens}
        return msg


def build_request(ctx: TaskContext, history=()) -> SteeringRequest:
    return SteeringRequest(
        instruction=ctx.instruction.text,
        observation=_pt(ctx.observation),
        keypoints={k: _pt(v) for k, v in keypoints(ctx).items()},
        history=tuple(history),
    )


@dataclass(frozen=True)
class ReflectionRecord:
    a0: np.ndarray = field(compare=False)
    a_star: np.ndarray = field(compare=False)
    post_context: TaskContext
    history: tuple[dict, ...]
    success: bool
    revised_program: RewardProgram | None = None
    rationale: str = ""


class Critic(Protocol):
    def objective(self, payload: dict) -> dict: ...

    def reflect(self, payload: dict) -> dict: ...


def goal_program(target: str) -> str:
    return f"neg(dist(action, {target}))"


class StubCritic:
    """Deterministic critic answering from the wire payload alone.

    Objectives come from a table keyed by the instructed target. Reflection
    declares success when the executed action lies within ``success_radius``
    of the instructed goal; on failure it revises the reward only when the
    current reward does not rank the instructed goal strictly above every
    other goal keypoint.
    """

    def __init__(self, success_radius: float = 0.15, wrong_first: bool = False):
        self.success_radius = success_radius
        self.wrong_first = wrong_first

    @staticmethod
    def _goals(kp: dict) -> list[str]:
        return [k for k in kp if k != "ee"]

    def _target(self, payload: dict) -> str:
        target = target_from_text(payload["instruction"], self._goals(payload["keypoints"]))
        if target is None:
            raise CriticProtocolError(f"stub cannot resolve instruction {payload['instruction']!r}")
        return target

    def objective(self, payload: dict) -> dict:
        target = self._target(payload)
        goals = self._goals(payload["keypoints"])
        prior = [h for h in payload.get("history", []) if h.get("kind") == "objective"]
        if self.wrong_first and not prior and len(goals) > 1:
            wrong = goals[(goals.index(target) + 1) % len(goals)]
            return {"reward_program": goal_program(wrong),
                    "rationale": f"scripted mis-specification: {wrong} instead of {target}"}
        return {"reward_program": goal_program(target),
                "rationale": f"approach {target}"}

    def reflect(self, payload: dict) -> dict:
        kp = {k: np.asarray(v, dtype=np.float64) for k, v in payload["keypoints"].items()}
        target = self._target(payload)
        a_star = np.asarray(payload["a_star"], dtype=np.float64)
        dist = float(np.linalg.norm(a_star - kp[target]))
        if dist <= self.success_radius:
            return {"success": True, "revised_program": None,
                    "rationale": f"executed action {dist:.3f} from {target}"}
        prog = parse(payload["reward_program"])
        goals = self._goals(kp)
        scores = {g: evaluate(prog, EvalScope(kp[g], kp)) for g in goals}
        consistent = all(scores[target] > s for g, s in scores.items() if g != target)
        if consistent:
            return {"success": False, "revised_program": None,
                    "rationale": f"reward ranks {target} first; re-steer"}
        return {"success": False, "revised_program": goal_program(target),
                "rationale": f"reward does not single out {target}; regenerated"}


class RemoteCritic:
    """HTTP JSON client for a critic service."""

    def __init__(self, backend: CriticBackend):
        self.backend = backend
        self.base = backend.endpoint.rstrip("/")

    def _post(self, route: str, payload: dict) -> dict:
        data = json.dumps(payload).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(TOKEN_ENV)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(self.base + route, data=data, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.backend.timeout) as resp:
                body = resp.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            raise CriticHTTPError(exc.code, exc.read().decode("utf-8", "replace")) from None
        except (socket.timeout, TimeoutError) as exc:
            raise CriticTimeout(f"{route} timed out after {self.backend.timeout}s") from exc
        except urllib.error.URLError as exc:
            if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                raise CriticTimeout(f"{route} timed out after {self.backend.timeout}s") from exc
            raise CriticUnavailable(f"{route}: {exc.reason}") from exc
        try:
            out = json.loads(body)
        except json.JSONDecodeError as exc:
            raise CriticUnparseable(f"{route} returned non-JSON body", body) from exc
        if not isinstance(out, dict):
            raise CriticUnparseable(f"{route} returned {type(out).__name__}, expected object", body)
        return out

    def objective(self, payload: dict) -> dict:
        return self._post("/objective", payload)

    def reflect(self, payload: dict) -> dict:
        return self._post("/reflect", payload)


def make_critic(backend: CriticBackend) -> Critic:
    if backend.kind == "stub":
        return StubCritic(backend.success_radius, backend.wrong_first)
    return RemoteCritic(backend)


def _exchange(kind: str, request: dict, response: Any, error: str | None = None) -> dict:
    req = {k: v for k, v in request.items() if k not in ("history", "prompt")}
    ex = {"kind": kind, "request": req, "response": response}
    if error:
        ex["error"] = error
    return ex


def _checked_program(text: Any, ctx: TaskContext) -> RewardProgram:
    if not isinstance(text, str):
        raise DslError(f"reward program must be a string, got {type(text).__name__}")
    prog = parse(text)
    validate(prog, ctx.scope(np.asarray(ctx.ee, dtype=np.float64)))
    return prog


def reason_objective(ctx: TaskContext, critic: Critic, history: list | None = None,
                     backend: CriticBackend | None = None) -> RewardProgram:
    """Ask the critic for a reward; re-prompt up to twice on unparseable replies.

    Every exchange (including failed ones) is appended to ``history``.
    """
    history = [] if history is None else history
    last = ""
    for _ in range(MAX_REPROMPTS + 1):
        payload = build_request(ctx, history).to_wire(backend)
        try:
            resp = critic.objective(payload)
        except CriticUnparseable as exc:
            last = exc.text
            history.append(_exchange("objective", payload, exc.text, str(exc)))
            continue
        text = resp.get("reward_program")
        last = text if isinstance(text, str) else json.dumps(resp)
        try:
            prog = _checked_program(text, ctx)
        except DslError as exc:
            log.info("critic program rejected: %s", exc)
            history.append(_exchange("objective", payload, resp, str(exc)))
            continue
        history.append(_exchange("objective", payload, resp))
        return prog
    raise CriticParseError(f"no valid reward after {MAX_REPROMPTS + 1} attempts", last)


def reflect(a0, a_star, post_ctx: TaskContext, history: list, program: RewardProgram,
            critic: Critic, backend: CriticBackend | None = None) -> ReflectionRecord:
    """Post-execution verdict; a revised reward comes back only on failure."""
    base = {
        "a0": _pt(a0),
        "a_star": _pt(a_star),
        "post_observation": _pt(post_ctx.observation),
        "keypoints": {k: _pt(v) for k, v in keypoints(post_ctx).items()},
        "instruction": post_ctx.instruction.text,
        "reward_program": program.text,
    }
    if backend is not None:
        base["decoding"] = {"temperature": backend.temperature, "max_tokens": backend.max_tokens}
    last = ""
    for _ in range(MAX_REPROMPTS + 1):
        payload = {**base, "history": list(history)}
        try:
            resp = critic.reflect(payload)
        except CriticUnparseable as exc:
            last = exc.text
            history.append(_exchange("reflect", payload, exc.text, str(exc)))
            continue
        if not isinstance(resp.get("success"), bool):
            raise CriticProtocolError("reflect response lacks a boolean 'success'")
        revised_text = resp.get("revised_program")
        revised = None
        if revised_text is not None and not resp["success"]:
            last = revised_text if isinstance(revised_text, str) else json.dumps(resp)
            try:
                revised = _checked_program(revised_text, post_ctx)
            except DslError as exc:
                history.append(_exchange("reflect", payload, resp, str(exc)))
                continue
        history.append(_exchange("reflect", payload, resp))
        return ReflectionRecord(
            a0=np.asarray(a0, dtype=np.float64).copy(),
            a_star=np.asarray(a_star, dtype=np.float64).copy(),
            post_context=post_ctx,
            history=tuple(history),
            success=resp["success"],
            revised_program=revised,
            rationale=str(resp.get("rationale", "")),
        )
    raise CriticParseError(f"no valid revised reward after {MAX_REPROMPTS + 1} attempts", last)
