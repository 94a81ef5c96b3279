"""Benchmark harness: config loading, policy training, method sweeps, metrics,
plots and replay of recorded episodes."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .diffusion import (DenoiserModel, TrainConfig, load_checkpoint, make_schedule,
                        save_checkpoint, train_policy)
from .envsim import ENV_KINDS, Environment, Scene, dump_demos, env_from_scene, make_env
from .numerics import RngStream, derive_seed
from .refine import TRACE_FORMAT_VERSION, EpisodeConfig, EpisodeTrace, run_episode
from .reward_dsl import parse
from .steering import SteeringConfig
from .verifier import CriticBackend, make_critic

log = logging.getLogger(__name__)

CONFIG_FORMAT_VERSION = 1
_TARGET_SALT = 0x7A9

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "evosteer run config",
    "type": "object",
    "required": ["format_version", "seed", "envs"],
    "additionalProperties": False,
    "properties": {
        "format_version": {"const": CONFIG_FORMAT_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "envs": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "required": ["kind"], "additionalProperties": False,
                "properties": {
                    "kind": {"enum": list(ENV_KINDS)},
                    "name": {"type": "string", "minLength": 1},
                    "params": {"type": "object"},
                    "scene": {"type": "object"},
                },
            },
        },
        "demos": {"type": "integer", "minimum": 1},
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "steps": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "emb_dim": {"type": "integer", "minimum": 1},
                "activation": {"enum": ["tanh", "relu"]},
                "T": {"type": "integer", "minimum": 1},
                "beta_start": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "beta_end": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "steering": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "M": {"type": "integer", "minimum": 1},
                "K": {"type": "integer", "minimum": 0},
                "tau": {"type": "number", "minimum": 0},
                "n": {"type": "integer", "minimum": 1},
            },
        },
        "critic": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["stub", "remote"]},
                "endpoint": {"type": ["string", "null"]},
                "timeout": {"type": "number", "exclusiveMinimum": 0},
                "temperature": {"type": "number", "minimum": 0},
                "max_tokens": {"type": "integer", "minimum": 1},
                "wrong_first": {"type": "boolean"},
            },
        },
        "methods": {
            "type": "array", "minItems": 1,
            "items": {
                "type": "object", "required": ["name"], "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "M": {"type": "integer", "minimum": 1},
                    "K": {"type": "integer", "minimum": 0},
                    "tau": {"type": "number", "minimum": 0},
                    "n": {"type": "integer", "minimum": 1},
                    "rounds": {"type": "integer", "minimum": 1},
                },
            },
        },
        "episodes": {"type": "integer", "minimum": 1},
        "out_dir": {"type": "string"},
    },
}

DEFAULT_METHODS = [
    {"name": "frozen", "M": 1, "K": 0, "rounds": 1},
    {"name": "selection", "K": 0, "rounds": 1},
    {"name": "evolution", "K": 10, "rounds": 1},
    {"name": "evolution_refine", "K": 10, "rounds": 3},
]


class ConfigError(ValueError):
    pass


class ReplayMismatch(RuntimeError):
    pass


@dataclass
class RunConfig:
    seed: int
    envs: list[dict]
    demos: int = 4000
    train: dict = field(default_factory=dict)
    steering: dict = field(default_factory=dict)
    critic: dict = field(default_factory=dict)
    methods: list[dict] = field(default_factory=lambda: copy.deepcopy(DEFAULT_METHODS))
    episodes: int = 100
    out_dir: str = "runs/default"
    format_version: int = CONFIG_FORMAT_VERSION

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            jsonschema.validate(raw, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config field '{where}': {exc.message}") from None
        cfg = cls(**raw)
        names = [m["name"] for m in cfg.methods]
        if len(set(names)) != len(names):
            raise ConfigError("config field 'methods': duplicate method names")
        envs = [cfg.env_name(i) for i in range(len(cfg.envs))]
        if len(set(envs)) != len(envs):
            raise ConfigError("config field 'envs': duplicate environment names; set 'name'")
        # constructing these runs their own range checks
        try:
            cfg.train_config(0)
            cfg.schedule()
            cfg.critic_backend()
            for m in cfg.methods:
                cfg.steering_config(m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def env(self, i: int) -> Environment:
        spec = self.envs[i]
        if "scene" in spec:
            return env_from_scene(Scene.from_dict({"kind": spec["kind"], **spec["scene"]}),
                                  derive_seed(self.seed, i))
        return make_env(spec["kind"], derive_seed(self.seed, i), **spec.get("params", {}))

    def env_name(self, i: int) -> str:
        return self.envs[i].get("name", self.envs[i]["kind"])

    def schedule(self):
        t = self.train
        return make_schedule(t.get("T", 50), t.get("beta_start", 1e-4), t.get("beta_end", 0.2))

    def train_config(self, i: int) -> TrainConfig:
        t = {k: v for k, v in self.train.items() if k not in ("T", "beta_start", "beta_end")}
        if "hidden" in t:
            t["hidden"] = tuple(t["hidden"])
        return TrainConfig(seed=derive_seed(self.seed, 0x7A1, i), **t)

    def steering_config(self, method: dict) -> SteeringConfig:
        base = {k: self.steering[k] for k in ("M", "K", "tau", "n") if k in self.steering}
        base.update({k: method[k] for k in ("M", "K", "tau", "n") if k in method})
        return SteeringConfig(**base)

    def critic_backend(self, radius: float = 0.15) -> CriticBackend:
        return CriticBackend(success_radius=radius, **self.critic)


def checkpoint_path(out_dir, env_name: str) -> Path:
    return Path(out_dir) / "checkpoints" / f"{env_name}.evst"


def cmd_train(cfg: RunConfig, out_dir=None) -> dict[str, tuple[Path, float]]:
    out = Path(out_dir or cfg.out_dir)
    results = {}
    for i in range(len(cfg.envs)):
        env, name = cfg.env(i), cfg.env_name(i)
        ctxs, acts = env.demos(cfg.demos, RngStream(derive_seed(cfg.seed, 0xDE70, i)))
        model, loss = train_policy((ctxs, acts), cfg.train_config(i), cfg.schedule())
        path = checkpoint_path(out, name)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, path)
            (out / "demos").mkdir(exist_ok=True)
            dump_demos(out / "demos" / f"{name}.evst", ctxs, acts)
        except OSError as exc:
            raise OSError(f"cannot write checkpoint under {out}: {exc}") from exc
        print(f"{name}: final training loss {loss:.6f} -> {path}")
        results[name] = (path, loss)
    return results


def episode_seed(global_seed: int, env_index: int, episode: int) -> int:
    return derive_seed(global_seed, env_index, episode)


def _episode(cfg: RunConfig, model: DenoiserModel, env: Environment, env_index: int,
             method: dict, episode: int, critic=None) -> EpisodeTrace:
    seed = episode_seed(cfg.seed, env_index, episode)
    target = env.episode_target(RngStream(seed, _TARGET_SALT))
    ecfg = EpisodeConfig(
        rounds=method.get("rounds", 1),
        steering=cfg.steering_config(method),
        critic=cfg.critic_backend(env.scene.success_radius),
        env_kind=env.scene.kind,
        seed=seed,
        target=target,
    )
    return run_episode(ecfg, model, env, critic)


_WORKER: dict = {}


def _worker_task(args):
    cfg_dict, ckpts, task = args
    if _WORKER.get("cfg") != cfg_dict:
        _WORKER.clear()
        _WORKER["cfg"] = cfg_dict
        _WORKER["run"] = RunConfig.from_dict(cfg_dict)
        _WORKER["models"] = {name: load_checkpoint(p) for name, p in ckpts.items()}
    cfg = _WORKER["run"]
    mi, ei, ep = task
    name = cfg.env_name(ei)
    trace = _episode(cfg, _WORKER["models"][name], cfg.env(ei), ei, cfg.methods[mi], ep)
    return task, _summarize(trace)


def _summarize(trace: EpisodeTrace) -> dict:
    final = trace.final
    return {
        "status": trace.status,
        "success": bool(final.success) if final else False,
        "aligned": bool(final.aligned) if final else False,
        "rounds": trace.round_count,
        "best_trace": trace.rounds[0].result.best_trace if trace.rounds else [],
        "records": trace.records(),
    }


def _stats(xs) -> tuple[float, float]:
    x = np.asarray(xs, dtype=np.float64)
    if x.size == 0:
        return 0.0, 0.0
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
    return float(x.mean()), se


@dataclass
class MetricsTable:
    rows: list[dict]

    def cell(self, method: str, env: str) -> dict:
        for r in self.rows:
            if r["method"] == method and r["env"] == env:
                return r
        raise KeyError((method, env))

    def csv_text(self) -> str:
        cols = ["method", "env", "msr", "msr_stderr", "soa", "soa_stderr", "mean_rounds", "episodes"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in sorted(self.rows, key=lambda r: (r["method"], r["env"])):
            w.writerow([r["method"], r["env"]] + [f"{r[c]:.6f}" for c in cols[2:7]] + [r["episodes"]])
        return buf.getvalue()


def run_bench(cfg: RunConfig, out_dir=None, workers: int = 1, write: bool = True):
    """Run every (method, env) cell; returns the metrics table and per-episode summaries."""
    out = Path(out_dir or cfg.out_dir)
    ckpts = {}
    for i in range(len(cfg.envs)):
        p = checkpoint_path(out, cfg.env_name(i))
        if not p.exists():
            raise FileNotFoundError(f"missing checkpoint {p}; run `evosteer train` first")
        ckpts[cfg.env_name(i)] = str(p)
    tasks = [(mi, ei, ep) for mi in range(len(cfg.methods)) for ei in range(len(cfg.envs))
             for ep in range(cfg.episodes)]
    cfg_dict = cfg.to_dict()
    args = [(cfg_dict, ckpts, t) for t in tasks]
    if workers > 1:
        with get_context("spawn").Pool(workers) as pool:
            done = pool.map(_worker_task, args, chunksize=max(1, len(args) // (4 * workers)))
    else:
        done = [_worker_task(a) for a in args]
    by_task = dict(done)

    rows, trace_rows, records = [], [], []
    for mi, m in enumerate(cfg.methods):
        for ei in range(len(cfg.envs)):
            env = cfg.env_name(ei)
            eps = [by_task[(mi, ei, ep)] for ep in range(cfg.episodes)]
            msr, msr_se = _stats([e["success"] for e in eps])
            soa, soa_se = _stats([e["aligned"] for e in eps])
            rows.append({"method": m["name"], "env": env, "msr": msr, "msr_stderr": msr_se,
                         "soa": soa, "soa_stderr": soa_se,
                         "mean_rounds": float(np.mean([e["rounds"] for e in eps])),
                         "episodes": len(eps)})
            traces = [e["best_trace"] for e in eps if e["best_trace"]]
            if traces:
                mean_best = np.mean(np.array(traces), axis=0)
                for g, v in enumerate(mean_best):
                    trace_rows.append((m["name"], env, g, float(v)))
            for ep, e in enumerate(eps):
                for rec in e["records"]:
                    records.append({"episode_id": f"{m['name']}/{env}/{ep}", "method": m["name"],
                                    "env": env, "episode": ep, **rec})
    table = MetricsTable(rows)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(table.csv_text(), encoding="utf-8")
        with open(out / "score_trace.csv", "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "env", "generation", "mean_best_score"])
            for r in sorted(trace_rows):
                w.writerow([r[0], r[1], r[2], f"{r[3]:.6f}"])
        header = {"kind": "header", "format_version": TRACE_FORMAT_VERSION,
                  "code_version": __version__, "config": cfg_dict, "checkpoints": ckpts}
        with open(out / "traces.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        write_plots(table, trace_rows, out)
    return table, by_task


def write_plots(table: MetricsTable, trace_rows, out: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "evosteer"
    meta = {"Date": None}

    fig, ax = plt.subplots(figsize=(6, 4))
    series: dict[tuple[str, str], list[tuple[int, float]]] = {}
    for m, e, g, v in trace_rows:
        series.setdefault((m, e), []).append((g, v))
    for (m, e), pts in sorted(series.items()):
        if len(pts) > 1:
            g, v = zip(*sorted(pts))
            ax.plot(g, v, marker="o", ms=3, label=f"{m} / {e}")
    ax.set_xlabel("generation")
    ax.set_ylabel("mean best score")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "score_vs_generation.svg", metadata=meta)
    plt.close(fig)

    rows = sorted(table.rows, key=lambda r: (r["env"], r["method"]))
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(rows)), 4))
    x = np.arange(len(rows))
    ax.bar(x, [r["msr"] for r in rows], yerr=[r["msr_stderr"] for r in rows], capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels([f"{r['method']}\n{r['env']}" for r in rows], fontsize=7)
    ax.set_ylabel("MSR")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(out / "msr_bars.svg", metadata=meta)
    plt.close(fig)


class RecordedCritic:
    """Answers critic calls from a recorded episode instead of a live service."""

    def __init__(self, records: list[dict]):
        self.records = sorted(records, key=lambda r: r["round"])
        self._reflect_i = 0

    def objective(self, payload: dict) -> dict:
        return {"reward_program": self.records[0]["program"], "rationale": "replayed"}

    def reflect(self, payload: dict) -> dict:
        rec = self.records[min(self._reflect_i, len(self.records) - 1)]
        self._reflect_i += 1
        return {"success": rec["verdict"], "revised_program": rec["revised_program"],
                "rationale": "replayed"}


def read_traces(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ReplayMismatch(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("kind") != "header":
        raise ReplayMismatch(f"{path}: missing trace header")
    version = header.get("format_version")
    if version != TRACE_FORMAT_VERSION:
        raise ReplayMismatch(
            f"{path}: trace format version {version} is not supported "
            f"(this build reads version {TRACE_FORMAT_VERSION})")
    return header, [json.loads(l) for l in lines[1:] if l.strip()]


def cmd_replay(trace_path, episode_id: str, echo=print) -> EpisodeTrace:
    """Re-run one recorded episode and check it reproduces bit for bit."""
    header, records = read_traces(trace_path)
    recs = sorted((r for r in records if r["episode_id"] == episode_id), key=lambda r: r["round"])
    if not recs:
        raise KeyError(f"episode {episode_id!r} not found in {trace_path}")
    cfg = RunConfig.from_dict(header["config"])
    method_name, env_name, ep = episode_id.rsplit("/", 2)
    mi = next(i for i, m in enumerate(cfg.methods) if m["name"] == method_name)
    ei = next(i for i in range(len(cfg.envs)) if cfg.env_name(i) == env_name)
    model = load_checkpoint(header["checkpoints"][env_name])
    critic = None
    if cfg.critic.get("kind", "stub") == "remote":
        critic = RecordedCritic(recs)
        echo("remote critic: replaying recorded programs and verdicts")
    trace = _episode(cfg, model, cfg.env(ei), ei, cfg.methods[mi], int(ep), critic)
    got = trace.records()
    if len(got) != len(recs):
        raise ReplayMismatch(f"round count {len(got)} != recorded {len(recs)}")
    keys = ("program", "steer_seed", "action", "best_score", "success", "aligned", "verdict",
            "revised_program", "status")
    for new, old in zip(got, recs):
        echo(f"round {new['round']}: program={new['program']} action={new['action']} "
             f"score={new.get('best_score')} success={new['success']} verdict={new.get('verdict')}")
        for k in keys:
            if new.get(k) != old.get(k):
                raise ReplayMismatch(
                    f"nondeterminism in round {new['round']} field {k!r}: "
                    f"recorded {old.get(k)!r}, replayed {new.get(k)!r}")
    echo(f"episode {episode_id}: replay matches ({trace.status})")
    return trace
