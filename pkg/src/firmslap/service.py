"""Live-run websocket bridge.

Hosts one executor run behind a websocket endpoint.  A subscriber first
receives a ``hello`` describing the environment and roadmap, then a stream
of ``state`` frames at a fixed sim-time rate.  Clients steer the run with
``command`` messages; each carries an ``issue_id`` echoed in an ``ack``.

Message catalog (websocket text frames carrying JSON, every payload tagged
with ``type`` and ``schema``):

  server -> client
    hello  {environment, nodes, edges, run: {policy, seed, dt}}
    state  {tick, sim_time, true_pose, mean, cov, active_edge, candidates,
            door_states, z_lost, recovering, goal_node, cum_cost, paused,
            outcome}
    ack    {issue_id, status: "accepted" | "rejected", reason?}
    error  {reason}        (malformed input; the connection stays open)
    end    {outcome, summary}

  client -> server
    command {issue_id, kind, ...}
      kinds: set_goal {x, y} | toggle_door {id} | kidnap {x, y, theta}
           | pause | resume | set_speed {multiplier}

State frames are droppable per subscriber (latest wins when a client reads
slowly); acks, errors and end messages are never dropped.  Simulation
commands take effect at the next tick boundary and are acknowledged after
that tick, so the first frame a client sees after its ack reflects the
post-command state.  pause/resume/set_speed act on the service loop and
are acknowledged immediately.
"""

from __future__ import annotations

import asyncio
import json
import time
from collections import deque
from contextlib import asynccontextmanager, suppress

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .config import ExecConfig, PlannerConfig
from .executor import Executor, Scenario
from .graph import FirmGraph
from .world import environment_doc

SCHEMA = 1

_SIM_KINDS = ("set_goal", "toggle_door", "kidnap")
_SERVICE_KINDS = ("pause", "resume", "set_speed")


class _Client:
    """Per-subscriber outbox: a lossless control queue plus a single
    latest-wins state-frame slot, drained by one sender task."""

    def __init__(self):
        self.ctrl: deque[str] = deque()
        self.frame: str | None = None
        self.closed = False
        self.wakeup = asyncio.Event()

    def push_ctrl(self, text: str) -> None:
        self.ctrl.append(text)
        self.wakeup.set()

    def offer_frame(self, text: str) -> None:
        self.frame = text
        self.wakeup.set()

    async def next_message(self) -> str | None:
        while True:
            if self.ctrl:
                return self.ctrl.popleft()
            if self.frame is not None:
                text, self.frame = self.frame, None
                return text
            if self.closed:
                return None
            self.wakeup.clear()
            await self.wakeup.wait()


class Bridge:
    """Owns the executor, the drive loop, and the subscriber set."""

    def __init__(self, graph: FirmGraph, scenario: Scenario,
                 pcfg: PlannerConfig, ecfg: ExecConfig, seed: int,
                 frame_rate: float = 10.0, speed: float = 1.0):
        self.ex = Executor(graph.world.clone(), graph.clone(), scenario,
                           pcfg, ecfg, seed=seed)
        self.seed = seed
        self.speed = float(speed)
        self.paused = False
        dt = self.ex.dt
        self._period = max(1, int(round(1.0 / (frame_rate * dt))))
        self._clients: set[_Client] = set()
        # (client, issue_id) pairs whose command sits in the executor queue.
        self._parked: list[tuple[_Client, object]] = []
        self._last_frame_tick = -1
        self._hello = json.dumps({
            "type": "hello", "schema": SCHEMA,
            "environment": environment_doc(graph.world),
            "nodes": [{"id": i, "x": float(n.point[0]), "y": float(n.point[1])}
                      for i, n in sorted(graph.nodes.items())],
            "edges": [{"id": e.id, "source": e.source, "target": e.target}
                      for e in graph.edges.values()],
            "run": {"policy": ecfg.policy, "seed": seed, "dt": dt},
        })

    # -- subscriber bookkeeping -----------------------------------------

    def register(self) -> _Client:
        c = _Client()
        self._clients.add(c)
        c.push_ctrl(self._hello)
        if self.ex.outcome is not None:
            c.push_ctrl(self._end_text())
        return c

    def unregister(self, client: _Client) -> None:
        self._clients.discard(client)
        client.closed = True
        client.wakeup.set()

    # -- message assembly -------------------------------------------------

    def _frame_text(self) -> str:
        ex = self.ex
        active = None
        if ex.active is not None:
            active = {"source": ex.active.ctrl.source,
                      "target": ex.active.ctrl.target,
                      "phase": ex.active.phase}
        dec = ex.decisions[-1] if ex.decisions else None
        return json.dumps({
            "type": "state", "schema": SCHEMA,
            "tick": ex.tick,
            "sim_time": round(ex.tick * ex.dt, 6),
            "true_pose": [float(v) for v in ex.x_true],
            "mean": [float(v) for v in ex.belief.mean],
            "cov": [float(v) for v in ex.belief.cov.reshape(-1)],
            "active_edge": active,
            "candidates": list(dec["candidates"]) if dec else [],
            "door_states": dict(ex.bmap.door_states),
            "z_lost": bool(ex.monitor.z_lost),
            "recovering": bool(ex.recovering),
            "goal_node": ex.goal_node,
            "cum_cost": float(ex.cum_cost),
            "paused": self.paused,
            "outcome": ex.outcome,
        })

    def _end_text(self) -> str:
        return json.dumps({"type": "end", "schema": SCHEMA,
                           "outcome": self.ex.outcome,
                           "summary": self.ex.record().summary()})

    @staticmethod
    def _ack(issue_id, status: str, reason: str | None = None) -> str:
        msg = {"type": "ack", "schema": SCHEMA, "issue_id": issue_id,
               "status": status}
        if reason:
            msg["reason"] = reason
        return json.dumps(msg)

    def _broadcast_frame(self) -> None:
        if self.ex.tick == self._last_frame_tick:
            return
        self._last_frame_tick = self.ex.tick
        text = self._frame_text()
        for c in self._clients:
            c.offer_frame(text)

    def _broadcast_ctrl(self, text: str) -> None:
        for c in self._clients:
            c.push_ctrl(text)

    # -- inbound handling --------------------------------------------------

    def handle(self, client: _Client, raw: str) -> None:
        try:
            msg = json.loads(raw)
        except json.JSONDecodeError as exc:
            client.push_ctrl(json.dumps({"type": "error", "schema": SCHEMA,
                                         "reason": f"not valid json: {exc}"}))
            return
        if not isinstance(msg, dict) or msg.get("type") != "command":
            client.push_ctrl(json.dumps({"type": "error", "schema": SCHEMA,
                                         "reason": "expected a command message"}))
            return
        if "issue_id" not in msg:
            client.push_ctrl(json.dumps({"type": "error", "schema": SCHEMA,
                                         "reason": "command without issue_id"}))
            return
        issue_id = msg["issue_id"]
        kind = msg.get("kind")
        if kind in _SERVICE_KINDS:
            reason = self._apply_service(kind, msg)
        elif kind in _SIM_KINDS:
            reason = self._submit_sim(client, kind, msg, issue_id)
            if reason is None:
                return  # acked after the applying tick
        else:
            reason = f"unknown command kind {kind!r}"
        status = "rejected" if reason else "accepted"
        client.push_ctrl(self._ack(issue_id, status, reason))

    def _apply_service(self, kind: str, msg: dict) -> str | None:
        if kind == "pause":
            self.paused = True
            return None
        if kind == "resume":
            self.paused = False
            return None
        try:
            mult = float(msg["multiplier"])
        except (KeyError, TypeError, ValueError):
            return "set_speed needs a numeric multiplier"
        if not (0.01 <= mult <= 100.0):
            return "multiplier outside [0.01, 100]"
        self.speed = mult
        return None

    def _submit_sim(self, client: _Client, kind: str, msg: dict,
                    issue_id) -> str | None:
        if self.ex.outcome is not None:
            return "run already ended"
        reason = self._validate(kind, msg)
        if reason:
            return reason
        payload = {"kind": kind}
        if kind == "set_goal":
            payload.update(x=float(msg["x"]), y=float(msg["y"]))
        elif kind == "toggle_door":
            payload.update(id=msg["id"])
        elif kind == "kidnap":
            payload.update(x=float(msg["x"]), y=float(msg["y"]),
                           theta=float(msg.get("theta", 0.0)))
        self.ex.submit_command(payload)
        self._parked.append((client, issue_id))
        return None

    def _validate(self, kind: str, msg: dict) -> str | None:
        xmin, ymin, xmax, ymax = self.ex.world.bounds
        try:
            if kind == "set_goal":
                x, y = float(msg["x"]), float(msg["y"])
                if not (xmin <= x <= xmax and ymin <= y <= ymax):
                    return "goal outside world bounds"
                if self.ex.bmap.collides(np.array([x, y, 0.0])):
                    return "goal inside believed obstacle"
            elif kind == "toggle_door":
                if msg["id"] not in self.ex.world.doors:
                    return f"unknown door {msg['id']!r}"
            elif kind == "kidnap":
                x, y = float(msg["x"]), float(msg["y"])
                if not (xmin <= x <= xmax and ymin <= y <= ymax):
                    return "kidnap target outside world bounds"
        except (KeyError, TypeError, ValueError) as exc:
            return f"bad command fields: {exc}"
        return None

    # -- drive loop ----------------------------------------------------------

    async def drive(self) -> None:
        loop = asyncio.get_running_loop()
        self._broadcast_frame()
        while self.ex.outcome is None:
            if self.paused:
                await asyncio.sleep(0.02)
                continue
            t0 = time.monotonic()
            parked, self._parked = self._parked, []
            await loop.run_in_executor(None, self.ex.step)
            for client, issue_id in parked:
                client.push_ctrl(self._ack(issue_id, "accepted"))
            if self.ex.tick % self._period == 0 or self.ex.outcome is not None:
                self._broadcast_frame()
            delay = self.ex.dt / self.speed - (time.monotonic() - t0)
            if delay > 0:
                await asyncio.sleep(delay)
        for client, issue_id in self._parked:
            client.push_ctrl(self._ack(issue_id, "rejected", "run ended"))
        self._parked = []
        self._broadcast_frame()
        self._broadcast_ctrl(self._end_text())

    async def sender(self, ws: WebSocket, client: _Client) -> None:
        while True:
            text = await client.next_message()
            if text is None:
                return
            await ws.send_text(text)


def create_app(graph: FirmGraph, scenario: Scenario, pcfg: PlannerConfig,
               ecfg: ExecConfig, seed: int = 0, frame_rate: float = 10.0,
               speed: float = 1.0) -> FastAPI:
    bridge = Bridge(graph, scenario, pcfg, ecfg, seed,
                    frame_rate=frame_rate, speed=speed)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        task = asyncio.create_task(bridge.drive())
        yield
        task.cancel()
        with suppress(asyncio.CancelledError):
            await task

    app = FastAPI(lifespan=lifespan)
    app.state.bridge = bridge

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        client = bridge.register()
        sender = asyncio.create_task(bridge.sender(ws, client))
        try:
            while True:
                raw = await ws.receive_text()
                bridge.handle(client, raw)
        except WebSocketDisconnect:
            pass
        finally:
            bridge.unregister(client)
            sender.cancel()
            with suppress(asyncio.CancelledError):
                await sender

    return app


def serve(graph: FirmGraph, scenario: Scenario, pcfg: PlannerConfig,
          ecfg: ExecConfig, seed: int = 0, host: str = "127.0.0.1",
          port: int = 8765, frame_rate: float = 10.0,
          speed: float = 1.0) -> None:
    import uvicorn
    app = create_app(graph, scenario, pcfg, ecfg, seed=seed,
                     frame_rate=frame_rate, speed=speed)
    uvicorn.run(app, host=host, port=port, log_level="warning")
