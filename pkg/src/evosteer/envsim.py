"""Deterministic 2D goal-reaching micro-environments.

A scene is a set of named goal points plus an end-effector start. The frozen
policy is trained on demonstrations that visit the demo modes with equal
probability regardless of the instruction, so steering has to pick (or find)
the instructed goal.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .diffusion import FORMAT_VERSION, MAGIC, CheckpointError, read_tensors, write_tensors
from .numerics import RngStream, gmm_logpdf
from .reward_dsl import EvalScope

ENV_KINDS = ("two_goal", "ring_goals", "narrow_gap")
WORKSPACE = 2.0
DEMO_SIGMA = 0.1


@dataclass(frozen=True)
class Scene:
    kind: str
    objects: dict[str, tuple[float, float]]
    goals: tuple[str, ...]
    modes: tuple[str, ...]
    ee_start: tuple[float, float] = (0.0, -1.5)
    success_radius: float = 0.15
    demo_sigma: float = DEMO_SIGMA

    def __post_init__(self):
        if self.success_radius <= 0:
            raise ValueError("success radius must be positive")
        for name, p in {**self.objects, "ee": self.ee_start}.items():
            if not all(abs(c) <= WORKSPACE for c in p):
                raise ValueError(f"{name} at {p} is outside the workspace")
        for g in (*self.goals, *self.modes):
            if g not in self.objects:
                raise ValueError(f"unknown object {g!r}")
        pts = np.array([self.objects[g] for g in self.goals])
        if len(pts) > 1:
            gaps = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
            min_gap = gaps[~np.eye(len(pts), dtype=bool)].min()
            # keeps success => aligned
            if not self.success_radius < min_gap / 2:
                raise ValueError(
                    f"success radius {self.success_radius} must be below half the "
                    f"minimum goal separation {min_gap:.3f}")

    def position(self, name: str) -> np.ndarray:
        return np.array(self.objects[name], dtype=np.float64)

    def mode_points(self) -> np.ndarray:
        return np.array([self.objects[m] for m in self.modes], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "objects": {k: list(v) for k, v in self.objects.items()},
            "goals": list(self.goals),
            "modes": list(self.modes),
            "ee_start": list(self.ee_start),
            "success_radius": self.success_radius,
            "demo_sigma": self.demo_sigma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            kind=d["kind"],
            objects={k: (float(v[0]), float(v[1])) for k, v in d["objects"].items()},
            goals=tuple(d["goals"]),
            modes=tuple(d["modes"]),
            ee_start=tuple(float(x) for x in d.get("ee_start", (0.0, -1.5))),
            success_radius=float(d.get("success_radius", 0.15)),
            demo_sigma=float(d.get("demo_sigma", DEMO_SIGMA)),
        )


@dataclass(frozen=True)
class Instruction:
    task_id: str
    target: str
    text: str


def instruction_for(scene: Scene, target: str) -> Instruction:
    if target not in scene.goals:
        raise ValueError(f"instruction target {target!r} is not a goal in {scene.kind}")
    return Instruction(f"{scene.kind}:{target}", target, instruction_text(target))


_TEXT = {
    "goal_left": "reach the left goal",
    "goal_right": "reach the right goal",
    "goal_gap": "reach the gap goal between the two goals",
}


def instruction_text(target: str) -> str:
    if target in _TEXT:
        return _TEXT[target]
    if target.startswith("goal_") and target[5:].isdigit():
        return f"reach goal {target[5:]}"
    return f"reach {target}"


def target_from_text(text: str, names) -> str | None:
    """Inverse of :func:`instruction_text` over the given object names."""
    for name in names:
        if instruction_text(name) == text.strip():
            return name
    return None


@dataclass(frozen=True)
class TaskContext:
    """Observation (object positions then end effector) plus the instruction."""

    scene: Scene
    instruction: Instruction
    ee: tuple[float, float]

    @property
    def observation(self) -> np.ndarray:
        pts = [self.scene.objects[k] for k in self.scene.objects] + [self.ee]
        return np.array(pts, dtype=np.float64).ravel()

    @property
    def vector(self) -> np.ndarray:
        """Policy conditioning input: observation plus a one-hot of the target goal."""
        onehot = np.array([g == self.instruction.target for g in self.scene.goals], dtype=np.float64)
        return np.concatenate([self.observation, onehot])

    @property
    def goal(self) -> np.ndarray:
        return self.scene.position(self.instruction.target)

    def scope(self, action) -> EvalScope:
        return EvalScope(np.asarray(action, dtype=np.float64), keypoints(self))


@dataclass(frozen=True)
class EpisodeOutcome:
    action: np.ndarray = field(compare=False)
    post_context: TaskContext
    success: bool
    aligned: bool
    distance: float
    out_of_bounds: bool = False


def keypoints(ctx: TaskContext) -> dict[str, np.ndarray]:
    """Named 2D points in scene order, end effector last."""
    out = {k: np.array(v, dtype=np.float64) for k, v in ctx.scene.objects.items()}
    out["ee"] = np.array(ctx.ee, dtype=np.float64)
    return out


def execute(ctx: TaskContext, action) -> EpisodeOutcome:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ValueError(f"action must be a finite 2-vector, got {a!r}")
    goal = ctx.goal
    distance = float(np.linalg.norm(a - goal))
    if np.any(np.abs(a) > WORKSPACE):
        post = replace(ctx, ee=ctx.ee)
        return EpisodeOutcome(a, post, False, False, distance, out_of_bounds=True)
    post = replace(ctx, ee=(float(a[0]), float(a[1])))
    goals = ctx.scene.goals
    dists = [float(np.linalg.norm(a - ctx.scene.position(g))) for g in goals]
    nearest = goals[int(np.argmin(dists))]
    success = distance <= ctx.scene.success_radius
    return EpisodeOutcome(a, post, success, nearest == ctx.instruction.target, distance)


@dataclass(frozen=True)
class Environment:
    scene: Scene
    default_target: str
    seed: int = 0

    def context(self, target: str | None = None) -> TaskContext:
        inst = instruction_for(self.scene, target or self.default_target)
        return TaskContext(self.scene, inst, self.scene.ee_start)

    def episode_target(self, rng: RngStream) -> str:
        """Instructed target for one benchmark episode."""
        if self.scene.kind == "narrow_gap":
            return self.default_target
        return self.scene.goals[int(rng.integers(len(self.scene.goals), 1)[0])]

    def gmm(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """The demo action distribution as ``(means, diag covs, weights)``."""
        mu = self.scene.mode_points()
        var = np.full_like(mu, self.scene.demo_sigma ** 2)
        w = np.full(len(mu), 1.0 / len(mu))
        return mu, var, w

    def demo_logpdf(self, x):
        return gmm_logpdf(*self.gmm(), x)

    def demos(self, n: int, rng: RngStream | None = None) -> tuple[np.ndarray, np.ndarray]:
        """``n`` (context vector, action) pairs; actions ignore the instruction."""
        if n < 1:
            raise ValueError("need at least one demo")
        rng = rng or RngStream(self.seed, 0xDE70)
        mu = self.scene.mode_points()
        k = rng.integers(len(mu), n)
        acts = mu[k] + self.scene.demo_sigma * rng.gauss(2 * n).reshape(n, 2)
        tgt = rng.integers(len(self.scene.goals), n)
        ctxs = np.stack([self.context(self.scene.goals[i]).vector for i in tgt])
        return ctxs, acts


def _two_goal(params: dict) -> tuple[Scene, str]:
    objects = {"goal_left": (-1.0, 0.0), "goal_right": (1.0, 0.0)}
    goals = ("goal_left", "goal_right")
    return Scene("two_goal", objects, goals, goals,
                 success_radius=params.get("success_radius", 0.15)), "goal_left"


def _ring_goals(params: dict) -> tuple[Scene, str]:
    k = int(params.get("n_modes", 4))
    if k < 2:
        raise ValueError("ring_goals needs at least 2 modes")
    r = float(params.get("radius", 1.0))
    objects = {}
    for i in range(k):
        th = 2 * math.pi * i / k
        # round away representation noise like cos(pi/2) = 6e-17
        objects[f"goal_{i}"] = (round(r * math.cos(th), 12) + 0.0, round(r * math.sin(th), 12) + 0.0)
    goals = tuple(objects)
    return Scene("ring_goals", objects, goals, goals,
                 ee_start=(0.0, 0.0),
                 success_radius=params.get("success_radius", 0.15)), "goal_0"


def _narrow_gap(params: dict) -> tuple[Scene, str]:
    gap = tuple(params.get("gap_goal", (0.0, 0.5)))
    objects = {"goal_left": (-1.0, 0.0), "goal_right": (1.0, 0.0), "goal_gap": gap}
    return Scene("narrow_gap", objects, ("goal_left", "goal_right", "goal_gap"),
                 ("goal_left", "goal_right"),
                 success_radius=params.get("success_radius", 0.15)), "goal_gap"


_BUILDERS = {"two_goal": _two_goal, "ring_goals": _ring_goals, "narrow_gap": _narrow_gap}


def make_env(kind: str, seed: int = 0, **params) -> Environment:
    if kind not in _BUILDERS:
        raise ValueError(f"unknown environment kind {kind!r}; expected one of {ENV_KINDS}")
    scene, target = _BUILDERS[kind](params)
    return Environment(scene, target, seed)


def env_from_scene(scene: Scene, seed: int = 0) -> Environment:
    default = {"narrow_gap": "goal_gap"}.get(scene.kind, scene.goals[0])
    return Environment(scene, default, seed)


def dump_demos(path, ctxs: np.ndarray, acts: np.ndarray) -> None:
    """Write demos with the checkpoint tensor container (T = 0 marks a dataset)."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", FORMAT_VERSION, acts.shape[1], ctxs.shape[1], 0))
    buf.write(struct.pack("<dd", 0.0, 0.0))
    write_tensors(buf, {"contexts": ctxs, "actions": acts})
    Path(path).write_bytes(buf.getvalue())


def load_demos(path) -> tuple[np.ndarray, np.ndarray]:
    buf = io.BytesIO(Path(path).read_bytes())
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version, _, _, T = struct.unpack("<IIII", buf.read(16))
    if version != FORMAT_VERSION or T != 0:
        raise CheckpointError(f"{path}: not a version-{FORMAT_VERSION} demo dataset")
    buf.read(16)
    t = read_tensors(buf)
    return t["contexts"], t["actions"]
