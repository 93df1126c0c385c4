"""Websocket bridge tests: the hello/state/ack/error/end message catalog,
command validation, and the applied-tick acknowledgment contract."""

import time
from dataclasses import replace

import pytest
from fastapi.testclient import TestClient

from firmslap.config import ExecConfig
from firmslap.executor import Scenario
from firmslap.service import SCHEMA, create_app
from helpers import SMALL_PCFG

PCFG = replace(SMALL_PCFG, n_mc_online=6)
FIRM = ExecConfig(policy="firm")
ROLL = ExecConfig(policy="rollout", rollout_radius=5.0)


def _app(graph, goals=(3, 0, 3, 0, 3, 0, 3, 0), ecfg=FIRM, seed=1,
         speed=50.0, max_ticks=None):
    """A long patrol keeps the run alive for the duration of a test."""
    scn = Scenario(graph.nodes[0].point.copy(),
                   [graph.nodes[g].point.copy() for g in goals],
                   max_ticks=max_ticks)
    return create_app(graph, scn, PCFG, ecfg, seed=seed, frame_rate=10.0,
                      speed=speed)


def _recv(ws, want_type, limit=400, where=None):
    """Read until a message of the given type (and predicate) arrives;
    every message on the way must carry the schema tag."""
    for _ in range(limit):
        msg = ws.receive_json()
        assert msg["schema"] == SCHEMA
        assert msg["type"] in ("hello", "state", "ack", "error", "end")
        if msg["type"] == want_type and (where is None or where(msg)):
            return msg
    raise AssertionError(f"no {want_type} within {limit} messages")


def _command(ws, issue_id, kind, **fields):
    ws.send_json({"type": "command", "issue_id": issue_id, "kind": kind,
                  **fields})


class TestHandshake:
    def test_hello_comes_first_and_describes_the_run(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                hello = ws.receive_json()
                assert hello["type"] == "hello" and hello["schema"] == SCHEMA
                assert hello["environment"]["schema"] == "firmslap-env/1"
                assert [n["id"] for n in hello["nodes"]] == [0, 1, 2, 3]
                assert all({"id", "source", "target"} <= set(e)
                           for e in hello["edges"])
                assert hello["run"]["policy"] == "firm"
                assert hello["run"]["seed"] == 1
                assert hello["run"]["dt"] == pytest.approx(0.1)

    def test_state_ticks_strictly_increase(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                ticks = [_recv(ws, "state")["tick"] for _ in range(6)]
                assert all(b > a for a, b in zip(ticks, ticks[1:]))

    def test_state_frame_fields(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                s = _recv(ws, "state", where=lambda m: m["tick"] > 0)
                assert len(s["true_pose"]) == 3 and len(s["mean"]) == 3
                assert len(s["cov"]) == 9
                assert s["goal_node"] == 3
                assert s["outcome"] is None and s["paused"] is False
                assert s["active_edge"] is None or \
                    {"source", "target", "phase"} <= set(s["active_edge"])


class TestServiceCommands:
    def test_pause_and_resume_ack_immediately(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                _command(ws, "p1", "pause")
                ack = _recv(ws, "ack")
                assert ack["issue_id"] == "p1" and ack["status"] == "accepted"
                assert client.app.state.bridge.paused
                _command(ws, "p2", "resume")
                ack = _recv(ws, "ack")
                assert ack["issue_id"] == "p2" and ack["status"] == "accepted"
                after = _recv(ws, "state")
                assert _recv(ws, "state")["tick"] > after["tick"]

    def test_set_speed(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                _command(ws, "s1", "set_speed", multiplier=5.0)
                assert _recv(ws, "ack")["status"] == "accepted"
                assert client.app.state.bridge.speed == 5.0
                _command(ws, "s2", "set_speed", multiplier="fast")
                ack = _recv(ws, "ack")
                assert ack["status"] == "rejected" and "multiplier" in ack["reason"]
                _command(ws, "s3", "set_speed", multiplier=1e6)
                assert _recv(ws, "ack")["status"] == "rejected"


class TestMalformedInput:
    def test_bad_json_then_connection_still_works(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                ws.send_text("this is not json {")
                err = _recv(ws, "error")
                assert "not valid json" in err["reason"]
                _command(ws, "ok", "pause")
                assert _recv(ws, "ack")["issue_id"] == "ok"

    def test_non_command_message(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                ws.send_json({"type": "telemetry"})
                assert "command" in _recv(ws, "error")["reason"]

    def test_missing_issue_id(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                ws.send_json({"type": "command", "kind": "pause"})
                assert "issue_id" in _recv(ws, "error")["reason"]

    def test_unknown_kind_is_rejected_not_fatal(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                _command(ws, "u1", "self_destruct")
                ack = _recv(ws, "ack")
                assert ack["status"] == "rejected"
                assert "unknown command kind" in ack["reason"]


class TestSimCommands:
    def test_rejections_are_validated_up_front(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                _command(ws, "g1", "set_goal", x=99.0, y=0.0)
                ack = _recv(ws, "ack")
                assert ack["status"] == "rejected" and "bounds" in ack["reason"]
                _command(ws, "g2", "set_goal", x=3.0, y=3.0)   # central block
                ack = _recv(ws, "ack")
                assert ack["status"] == "rejected" and "obstacle" in ack["reason"]
                _command(ws, "d1", "toggle_door", id="no-such-door")
                ack = _recv(ws, "ack")
                assert ack["status"] == "rejected" and "door" in ack["reason"]
                _command(ws, "k1", "kidnap", x=-5.0, y=0.0)
                assert _recv(ws, "ack")["status"] == "rejected"
                _command(ws, "g3", "set_goal", x="here", y=0.0)
                ack = _recv(ws, "ack")
                assert ack["status"] == "rejected" and "bad command" in ack["reason"]

    def test_kidnap_acked_after_applying_tick(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                before = _recv(ws, "state")
                _command(ws, "k1", "kidnap", x=4.5, y=1.5, theta=0.0)
                ack = _recv(ws, "ack")
                assert ack["issue_id"] == "k1" and ack["status"] == "accepted"
                after = _recv(ws, "state")
                assert after["tick"] > before["tick"]
                lost = _recv(ws, "state", where=lambda m: m["z_lost"])
                assert lost["tick"] - after["tick"] <= 20
                # no translation while relocalizing, so the pose stays put
                assert abs(lost["true_pose"][0] - 4.5) < 0.6
                assert abs(lost["true_pose"][1] - 1.5) < 0.6
                rec = _recv(ws, "state", where=lambda m: m["recovering"])
                found = _recv(ws, "state",
                              where=lambda m: not m["recovering"] and
                              not m["z_lost"] and m["tick"] > rec["tick"])
                assert found["cum_cost"] >= rec["cum_cost"]

    def test_set_goal_redirects_the_run(self, small_graph):
        with TestClient(_app(small_graph)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                _recv(ws, "state")
                _command(ws, "g1", "set_goal", x=1.5, y=4.5)   # node 2
                assert _recv(ws, "ack")["status"] == "accepted"
                s = _recv(ws, "state", where=lambda m: m["goal_node"] == 2)
                assert s["outcome"] is None


class TestRolloutFrames:
    def test_candidates_appear_after_a_decision(self, small_graph):
        with TestClient(_app(small_graph, ecfg=ROLL, speed=100.0)) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                s = _recv(ws, "state", where=lambda m: m["candidates"])
                for c in s["candidates"]:
                    assert {"target", "value", "success",
                            "failure_prob"} <= set(c)


class TestEndOfRun:
    def test_end_message_and_late_subscriber(self, small_graph):
        app = _app(small_graph, goals=(3,), speed=100.0, max_ticks=4)
        with TestClient(app) as client:
            with client.websocket_connect("/ws") as ws:
                _recv(ws, "hello")
                end = _recv(ws, "end")
                assert end["outcome"] == "timeout"
                assert end["summary"]["ticks"] == 4
                _command(ws, "late", "kidnap", x=2.0, y=2.0)
                ack = _recv(ws, "ack")
                assert ack["status"] == "rejected" and "ended" in ack["reason"]
            deadline = time.time() + 5.0
            while app.state.bridge.ex.outcome is None and time.time() < deadline:
                time.sleep(0.01)
            with client.websocket_connect("/ws") as ws:
                assert ws.receive_json()["type"] == "hello"
                nxt = _recv(ws, "end", limit=5)
                assert nxt["summary"]["outcome"] == "timeout"
