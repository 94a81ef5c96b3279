import json

import numpy as np
import pytest

from evosteer.refine import EpisodeConfig, round_seed, run_episode, write_jsonl
from evosteer.steering import SteeringConfig
from evosteer.verifier import CriticBackend, CriticTimeout, StubCritic


class RecordingCritic(StubCritic):
    def __init__(self, **kw):
        super().__init__(**kw)
        self.payloads = []

    def objective(self, payload):
        self.payloads.append(("objective", json.loads(json.dumps(payload))))
        return super().objective(payload)

    def reflect(self, payload):
        self.payloads.append(("reflect", json.loads(json.dumps(payload))))
        return super().reflect(payload)


class FailingCritic(StubCritic):
    def reflect(self, payload):
        raise CriticTimeout("/reflect timed out after 30.0s")


def cfg(**kw):
    kw.setdefault("steering", SteeringConfig())
    return EpisodeConfig(**kw)


class TestRunEpisode:
    def test_correct_critic_one_round(self, two_goal):
        env, model, _ = two_goal
        tr = run_episode(cfg(seed=1, target="goal_right"), model, env)
        assert tr.status == "success" and tr.round_count == 1
        assert tr.rounds[0].program.text == "neg(dist(action, goal_right))"

    def test_wrong_then_corrected(self, two_goal):
        env, model, _ = two_goal
        tr = run_episode(cfg(seed=2, target="goal_right", critic=CriticBackend(wrong_first=True)),
                         model, env)
        assert tr.status == "success" and tr.round_count == 2
        first, second = tr.rounds
        assert first.program.text == "neg(dist(action, goal_left))"
        assert first.reflection.revised_program.text == "neg(dist(action, goal_right))"
        assert second.program == first.reflection.revised_program

    def test_budget_exhausted(self, narrow):
        env, model, _ = narrow
        statuses = [run_episode(cfg(rounds=1, seed=s, steering=SteeringConfig(K=0)), model, env).status
                    for s in range(20)]
        assert statuses.count("budget_exhausted") >= 10

    def test_status_matches_last_outcome(self, narrow):
        env, model, _ = narrow
        for s in range(5):
            tr = run_episode(cfg(rounds=2, seed=s, steering=SteeringConfig(K=2)), model, env)
            assert tr.round_count <= 2
            assert (tr.status == "success") == tr.final.success

    def test_restart_without_revision_reseeds(self, narrow):
        env, model, _ = narrow
        tr = run_episode(cfg(rounds=3, seed=0, steering=SteeringConfig(K=1)), model, env)
        assert tr.status == "budget_exhausted" and tr.round_count == 3
        assert len({r.program for r in tr.rounds}) == 1
        assert [r.steer_seed for r in tr.rounds] == [round_seed(0, r) for r in range(3)]
        assert len({r.steer_seed for r in tr.rounds}) == 3

    def test_a0_is_first_initial_proposal(self, two_goal):
        env, model, _ = two_goal
        tr = run_episode(cfg(seed=3, critic=CriticBackend(wrong_first=True)), model, env)
        assert np.array_equal(tr.a0, tr.rounds[0].result.initial[0])
        assert np.array_equal(tr.rounds[1].reflection.a0, tr.a0)

    def test_replay_bitwise(self, two_goal):
        env, model, _ = two_goal
        c = cfg(seed=4, target="goal_left", critic=CriticBackend(wrong_first=True))
        a = json.dumps(run_episode(c, model, env).records(), sort_keys=True)
        run_episode(cfg(seed=99), model, env)  # unrelated episode in between
        b = json.dumps(run_episode(c, model, env).records(), sort_keys=True)
        assert a == b

    def test_history_monotone(self, narrow):
        env, model, _ = narrow
        critic = RecordingCritic()
        tr = run_episode(cfg(rounds=3, seed=5, steering=SteeringConfig(K=1)), model, env, critic)
        reflects = [p for kind, p in critic.payloads if kind == "reflect"]
        assert len(reflects) == tr.round_count == 3
        for r, payload in enumerate(reflects):
            # objective exchange plus one reflect exchange per earlier round
            kinds = [h["kind"] for h in payload["history"]]
            assert kinds == ["objective"] + ["reflect"] * r
            assert payload["history"] == tr.history[:r + 1]

    def test_critic_error_aborts(self, two_goal):
        env, model, _ = two_goal
        tr = run_episode(cfg(seed=6), model, env, FailingCritic())
        assert tr.status == "aborted_error"
        assert "CriticTimeout" in tr.error and tr.round_count == 0

    def test_unreachable_remote_aborts(self, two_goal):
        env, model, _ = two_goal
        backend = CriticBackend(kind="remote", endpoint="http://127.0.0.1:9", timeout=1.0)
        tr = run_episode(cfg(seed=7, critic=backend), model, env)
        assert tr.status == "aborted_error" and "CriticUnavailable" in tr.error
        assert tr.records()[0]["status"] == "aborted_error"

    def test_rounds_validated(self):
        with pytest.raises(ValueError):
            EpisodeConfig(rounds=0)

    def test_jsonl_export(self, two_goal, tmp_path):
        env, model, _ = two_goal
        tr = run_episode(cfg(seed=8, critic=CriticBackend(wrong_first=True)), model, env)
        write_jsonl(tmp_path / "t.jsonl", tr.records(episode=8))
        rows = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
        assert [r["round"] for r in rows] == [1, 2]
        assert rows[0]["status"] == "continue" and rows[-1]["status"] == "success"
        assert rows[0]["verdict"] is False and rows[0]["revised_program"]
        assert rows[0]["a0"] == rows[1]["a0"] and rows[0]["episode"] == 8
        for key in ("program", "best_score", "success", "aligned", "distance", "action"):
            assert key in rows[0]
