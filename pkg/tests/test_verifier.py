import json
import logging

import jsonschema
import numpy as np
import pytest

from evosteer.envsim import execute, make_env
from evosteer.mock_critic import MockCriticServer
from evosteer.reward_dsl import parse
from evosteer.verifier import (STAGES, TOKEN_ENV, CriticBackend, CriticHTTPError, CriticParseError,
                               CriticProtocolError, CriticTimeout, CriticUnavailable, CriticUnparseable,
                               RemoteCritic,
                               StubCritic, build_request, make_critic, reason_objective, reflect)

POINT = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
OBJECTIVE_REQUEST = {
    "type": "object",
    "required": ["instruction", "observation", "keypoints", "stages", "history"],
    "properties": {
        "instruction": {"type": "string", "minLength": 1},
        "observation": {"type": "array", "items": {"type": "number"}},
        "keypoints": {"type": "object", "additionalProperties": POINT},
        "stages": {"type": "array", "items": {"type": "string"}},
        "history": {"type": "array"},
    },
}
REFLECT_REQUEST = {
    "type": "object",
    "required": ["a0", "a_star", "post_observation", "keypoints", "history"],
    "properties": {
        "a0": POINT, "a_star": POINT,
        "post_observation": {"type": "array", "items": {"type": "number"}},
        "keypoints": {"type": "object", "additionalProperties": POINT},
        "history": {"type": "array"},
    },
}
OBJECTIVE_RESPONSE = {
    "type": "object", "required": ["reward_program", "rationale"],
    "properties": {"reward_program": {"type": "string"}, "rationale": {"type": "string"}},
}
REFLECT_RESPONSE = {
    "type": "object", "required": ["success", "revised_program", "rationale"],
    "properties": {"success": {"type": "boolean"},
                   "revised_program": {"type": ["string", "null"]},
                   "rationale": {"type": "string"}},
}


@pytest.fixture
def server():
    with MockCriticServer() as srv:
        yield srv


def remote(srv, timeout=5.0):
    return RemoteCritic(CriticBackend(kind="remote", endpoint=srv.url, timeout=timeout))


def ctx_for(kind="two_goal", target=None):
    return make_env(kind).context(target)


class TestRequest:
    def test_four_stages_rendered(self):
        text = build_request(ctx_for()).render()
        for i, stage in enumerate(STAGES):
            assert f"## {i + 1}. {stage.title()}" in text
        assert "reach the left goal" in text and "goal_right=(1.000, 0.000)" in text

    def test_wire_fields(self):
        wire = build_request(ctx_for()).to_wire(CriticBackend(kind="remote", endpoint="http://x"))
        jsonschema.validate(wire, OBJECTIVE_REQUEST)
        assert wire["decoding"] == {"temperature": 0.2, "max_tokens": 1000}
        assert list(wire["keypoints"]) == ["goal_left", "goal_right", "ee"]

    def test_backend_validation(self):
        with pytest.raises(ValueError):
            CriticBackend(timeout=0)
        with pytest.raises(ValueError):
            CriticBackend(kind="remote")
        with pytest.raises(ValueError):
            CriticBackend(kind="oracle")


class TestStub:
    def test_table_lookup(self):
        prog = reason_objective(ctx_for(target="goal_left"), StubCritic())
        assert prog.text == "neg(dist(action, goal_left))"

    @pytest.mark.parametrize("kind", ["two_goal", "ring_goals", "narrow_gap"])
    def test_every_goal(self, kind):
        env = make_env(kind)
        for g in env.scene.goals:
            assert reason_objective(env.context(g), StubCritic()).text == f"neg(dist(action, {g}))"

    def test_pure(self):
        payload = build_request(ctx_for()).to_wire()
        assert StubCritic().objective(payload) == StubCritic().objective(payload)

    def test_success_verdict(self):
        ctx = ctx_for(target="goal_right")
        prog = parse("neg(dist(action, goal_right))")
        post = execute(ctx, [1.05, 0.0]).post_context
        rec = reflect([0, 0], [1.05, 0.0], post, [], prog, StubCritic())
        assert rec.success and rec.revised_program is None

    def test_wrong_goal_revised(self):
        ctx = ctx_for(target="goal_right")
        history = []
        wrong = reason_objective(ctx, StubCritic(wrong_first=True), history)
        assert wrong.text == "neg(dist(action, goal_left))"
        post = execute(ctx, [-1.0, 0.0]).post_context
        rec = reflect([0, 0], [-1.0, 0.0], post, history, wrong, StubCritic(wrong_first=True))
        assert not rec.success
        assert rec.revised_program.text == "neg(dist(action, goal_right))"

    def test_consistent_reward_not_revised(self):
        ctx = ctx_for(target="goal_right")
        prog = parse("neg(dist(action, goal_right))")
        post = execute(ctx, [0.5, 0.5]).post_context
        rec = reflect([0, 0], [0.5, 0.5], post, [], prog, StubCritic())
        assert not rec.success and rec.revised_program is None

    def test_tied_reward_is_inconsistent(self):
        ctx = ctx_for(target="goal_right")
        prog = parse("max(neg(dist(action, goal_left)), neg(dist(action, goal_right)))")
        post = execute(ctx, [0.0, 0.0]).post_context
        rec = reflect([0, 0], [0.0, 0.0], post, [], prog, StubCritic())
        assert rec.revised_program.text == "neg(dist(action, goal_right))"

    def test_reflect_only_appends(self):
        ctx = ctx_for(target="goal_right")
        history = []
        prog = reason_objective(ctx, StubCritic(), history)
        before = json.dumps(history, sort_keys=True)
        post = execute(ctx, [1.0, 0.0]).post_context
        rec = reflect([0, 0], [1.0, 0.0], post, history, prog, StubCritic())
        assert json.dumps(history[:1], sort_keys=True) == before
        assert len(history) == 2 and [h["kind"] for h in history] == ["objective", "reflect"]
        assert rec.history == tuple(history)


class TestRemote:
    def test_objective_contract(self, server):
        prog = reason_objective(ctx_for(), remote(server))
        assert prog.text == "neg(dist(action, goal_left))"
        route, body = server.requests[0]
        assert route == "/objective"
        jsonschema.validate(body, OBJECTIVE_REQUEST)
        jsonschema.validate(StubCritic().objective(body), OBJECTIVE_RESPONSE)

    def test_reflect_contract(self, server):
        ctx = ctx_for(target="goal_right")
        history = []
        critic = remote(server)
        prog = reason_objective(ctx, critic, history)
        post = execute(ctx, [0.2, 0.3]).post_context
        rec = reflect([0.1, 0.1], [0.2, 0.3], post, history, prog, critic)
        assert rec.success is False and rec.revised_program is None
        route, body = server.requests[-1]
        assert route == "/reflect"
        jsonschema.validate(body, REFLECT_REQUEST)
        jsonschema.validate(StubCritic().reflect(body), REFLECT_RESPONSE)
        assert body["history"][0]["kind"] == "objective"

    def test_retry_then_success(self, server):
        server.enqueue("/objective", {"raw": "I think you should go left"},
                       {"json": {"reward_program": "neg(dist(action,", "rationale": ""}})
        history = []
        prog = reason_objective(ctx_for(), remote(server), history)
        assert prog.text == "neg(dist(action, goal_left))"
        assert len(server.requests) == 3
        assert len(history) == 3
        assert history[0]["response"] == "I think you should go left"
        assert "non-JSON" in history[0]["error"]

    def test_bad_program_twice_then_valid(self, server):
        server.enqueue("/objective",
                       {"json": {"reward_program": "dist(action", "rationale": ""}},
                       {"json": {"reward_program": "neg(dist(action, mug_handle))", "rationale": ""}})
        history = []
        prog = reason_objective(ctx_for(), remote(server), history)
        assert prog.text == "neg(dist(action, goal_left))"
        assert len(history) == 3
        assert "unclosed call" in history[0]["error"]
        assert "mug_handle" in history[1]["error"]
        # each re-prompt carries the failed exchanges
        assert [len(body["history"]) for _, body in server.requests] == [0, 1, 2]

    def test_three_bad_programs(self, server):
        bad = {"json": {"reward_program": "frob(action)", "rationale": ""}}
        server.enqueue("/objective", bad, bad, {"json": {"reward_program": "1 +", "rationale": ""}})
        with pytest.raises(CriticParseError) as err:
            reason_objective(ctx_for(), remote(server))
        assert err.value.last_text == "1 +"

    def test_non_json_body(self, server):
        server.enqueue("/objective", {"raw": "not json"}, {"json": [1, 2]})
        with pytest.raises(CriticUnparseable) as err:
            remote(server).objective({"instruction": "x"})
        assert err.value.text == "not json"
        with pytest.raises(CriticProtocolError):
            remote(server).objective({"instruction": "x"})

    def test_unparseable_three_times(self, server):
        server.enqueue("/objective", *[{"raw": f"prose {i}"} for i in range(3)])
        with pytest.raises(CriticParseError) as err:
            reason_objective(ctx_for(), remote(server))
        assert err.value.last_text == "prose 2"

    def test_timeout(self, server):
        server.enqueue("/objective", {"delay": 1.0})
        with pytest.raises(CriticTimeout):
            reason_objective(ctx_for(), remote(server, timeout=0.2))

    @pytest.mark.parametrize("status", [400, 429, 500, 503])
    def test_http_errors(self, server, status):
        server.enqueue("/reflect", {"status": status, "body": "nope"})
        with pytest.raises(CriticHTTPError) as err:
            remote(server).reflect({})
        assert err.value.status == status

    def test_unreachable(self):
        srv = MockCriticServer()
        url = srv.url
        srv.stop()
        critic = RemoteCritic(CriticBackend(kind="remote", endpoint=url, timeout=1.0))
        with pytest.raises(CriticUnavailable):
            critic.objective({})

    def test_reflect_missing_success(self, server):
        server.enqueue("/reflect", {"json": {"revised_program": None}})
        ctx = ctx_for()
        with pytest.raises(CriticProtocolError):
            reflect([0, 0], [0, 0], ctx, [], parse("0"), remote(server))

    def test_bad_revision_reprompts(self, server):
        server.enqueue("/reflect", {"json": {"success": False, "revised_program": "dist(", "rationale": ""}})
        ctx = ctx_for(target="goal_right")
        history = []
        rec = reflect([0, 0], [-1, 0], execute(ctx, [-1, 0]).post_context, history,
                      parse("neg(dist(action, goal_left))"), remote(server))
        assert rec.revised_program.text == "neg(dist(action, goal_right))"
        assert len(history) == 2 and "error" in history[0]

    def test_token_sent_not_logged(self, server, monkeypatch, caplog):
        monkeypatch.setenv(TOKEN_ENV, "s3cret-value")
        caplog.set_level(logging.DEBUG)
        server.enqueue("/objective", {"raw": "oops"})
        history = []
        reason_objective(ctx_for(), remote(server), history)
        assert server.headers[0]["Authorization"] == "Bearer s3cret-value"
        assert "s3cret-value" not in caplog.text
        assert "s3cret-value" not in json.dumps(history)

    def test_make_critic(self, server):
        assert isinstance(make_critic(CriticBackend()), StubCritic)
        assert isinstance(make_critic(CriticBackend(kind="remote", endpoint=server.url)), RemoteCritic)

    def test_mock_rejects_bad_requests(self, server):
        import urllib.error
        import urllib.request

        req = urllib.request.Request(server.url + "/objective", data=b"[1, 2", method="POST")
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(req, timeout=2)
        assert err.value.code == 400
        req = urllib.request.Request(server.url + "/other", data=b"{}", method="POST")
        with pytest.raises(urllib.error.HTTPError) as err:
            urllib.request.urlopen(req, timeout=2)
        assert err.value.code == 404
