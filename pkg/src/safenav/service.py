"""Live driver-assist service.

One asyncio loop task owns all simulator and planner state, ticking at the
control rate: it latches the newest joystick command, runs the assist logic,
advances the true model, and broadcasts a state frame to every connected
client. Sessions only exchange messages with the loop (commands in through a
queue, snapshots out through per-client queues), so there is no shared
mutable state across connections.

Wire protocol (JSON text frames, ``v`` = protocol version 1):

  server -> client
    {"v":1,"type":"hello","map":{...},"limits":{...},"r_ego":...,"soft_scale":...}
    {"v":1,"type":"map","version":k,"full":bool,"runs":[[start,count,level],...]}
    {"v":1,"type":"state","seq":n,"clock":t,"pose":[x,y,th],"mode":...,
     "applied_seq":m,"joy_traj":[[x,y],...],"plan":[[x,y],...]|null,
     "costs":{"threshold":c,"plan":c|null},"r0":...,"r_dt":...,"n_eps":...,
     "epsilon":...,"emergency":bool,"paused":bool,"contacts":n,"map_version":k}
    {"v":1,"type":"error","message":...}

  client -> server (each carries a client-chosen "seq", echoed as applied_seq)
    {"seq":n,"type":"joystick","v":...,"omega":...}
    {"seq":n,"type":"set_epsilon","epsilon":...}
    {"seq":n,"type":"pause"}   {"seq":n,"type":"reset"}

Map levels are bytes: 255 is the lethal tier, 0-254 scale the soft tier by
``soft_scale``. Runs carry absolute values, so reapplying a patch is a no-op.
"""

from __future__ import annotations

import asyncio
import json
import math
import time

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from .assist import JoystickCmd, assist_step
from .config import RunConfig
from .control import DiscrepancyBounds, tube_radius
from .core import Pose
from .gridmap import OccupancyGrid, buffer_cells, inflate, sensor_update
from .simulator import init_state, step_true

PROTOCOL_VERSION = 1
CLIENT_QUEUE_SIZE = 64


def encode_levels(costmap, soft_scale: float) -> np.ndarray:
    lethal = costmap.cells >= costmap.lethal_threshold
    soft = np.clip(np.rint(254.0 * costmap.cells / soft_scale), 0, 254).astype(np.uint8)
    return np.where(lethal, np.uint8(255), soft)


def rle_runs(levels: np.ndarray, changed: np.ndarray | None = None) -> list:
    """Run-length encode flat levels; ``changed`` limits runs to a mask."""
    flat = levels.ravel()
    if changed is None:
        mask = np.ones(flat.size, dtype=bool)
    else:
        mask = changed.ravel()
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return []
    runs = []
    start = int(idx[0])
    value = int(flat[start])
    count = 1
    for i in idx[1:]:
        i = int(i)
        if i == start + count and int(flat[i]) == value:
            count += 1
        else:
            runs.append([start, count, value])
            start, value, count = i, int(flat[i]), 1
    runs.append([start, count, value])
    return runs


class AssistServer:
    """Owns the sim + assist loop and the connected sessions."""

    def __init__(self, cfg: RunConfig, bounds: DiscrepancyBounds,
                 matched_scores=None, unmatched_scores=None):
        self.cfg = cfg
        self.bounds = bounds
        self.matched_scores = matched_scores
        self.unmatched_scores = unmatched_scores
        self.epsilon = cfg.epsilon
        self.soft_scale = max(cfg.alpha_shift * 30.0, 1e-9)
        self.commands: asyncio.Queue = asyncio.Queue()
        self.clients: list[asyncio.Queue] = []
        self.seq = 0
        self.map_version = 0
        self.paused = False
        self.contacts = 0
        self.emergency = False
        self._stop = asyncio.Event()
        self._levels = None
        self._last_error = None
        self.reset()

    # -- state management (loop task only) --

    def reset(self):
        cfg = self.cfg
        self.sim = init_state(Pose(*cfg.serve.start), cfg.disturbance, cfg.assist.dt)
        self.grid = OccupancyGrid.unknown(cfg.geometry)
        self.joystick = JoystickCmd(0.0, 0.0)
        self.applied_seq = 0
        self.contacts = 0
        self.rng_sim = np.random.default_rng(cfg.seeds.sim)
        self.rng_plan = np.random.default_rng(cfg.seeds.planner)
        self._recompute_bounds()
        self._reinflate(force=True)

    def _recompute_bounds(self):
        if self.matched_scores is not None and abs(self.epsilon - self.bounds.epsilon) > 1e-12:
            from .conformal import conformal_quantile
            self.bounds = DiscrepancyBounds(
                conformal_quantile(self.matched_scores, self.epsilon),
                conformal_quantile(self.unmatched_scores, self.epsilon),
                self.epsilon, len(self.matched_scores))
        self.r0 = tube_radius(0.0, self.bounds, self.cfg.tube)
        self.r_dt = tube_radius(self.cfg.tube.dt, self.bounds, self.cfg.tube)
        quant = math.sqrt(0.5) * self.cfg.geometry.resolution
        self.n_eps = buffer_cells(self.r_dt + quant, self.cfg.experiment.r_ego,
                                  self.cfg.geometry.resolution)

    def _reinflate(self, force=False):
        self.costmap = inflate(self.grid, self.n_eps, alpha_shift=self.cfg.alpha_shift,
                               lethal=self.cfg.weights.cap)
        new_levels = encode_levels(self.costmap, self.soft_scale)
        if force or self._levels is None:
            self.map_version += 1
            self._levels = new_levels
            self._broadcast_map(full=True)
        elif not np.array_equal(new_levels, self._levels):
            changed = new_levels != self._levels
            self.map_version += 1
            self._levels = new_levels
            self._broadcast_map(full=False, changed=changed)

    def _map_message(self, full: bool, changed=None) -> dict:
        return {"v": PROTOCOL_VERSION, "type": "map", "version": self.map_version,
                "full": full,
                "runs": rle_runs(self._levels, None if full else changed)}

    def _broadcast_map(self, full: bool, changed=None):
        self._broadcast(self._map_message(full, changed))

    def _broadcast(self, message: dict):
        text = json.dumps(message)
        for q in self.clients:
            while q.full():
                try:
                    q.get_nowait()
                except asyncio.QueueEmpty:
                    break
            q.put_nowait(text)

    def _apply_command(self, cmd: dict):
        kind = cmd.get("type")
        if kind == "joystick":
            self.joystick = JoystickCmd(float(cmd["v"]), float(cmd["omega"]))
        elif kind == "set_epsilon":
            eps = float(cmd["epsilon"])
            if not (0.0 < eps < 1.0):
                raise ValueError(f"epsilon must be in (0, 1), got {eps}")
            if self.matched_scores is None:
                raise ValueError("no calibration scores loaded; epsilon is fixed "
                                 f"at {self.bounds.epsilon}")
            self.epsilon = eps
            self._recompute_bounds()
            self._reinflate()
        elif kind == "pause":
            self.paused = not self.paused
        elif kind == "reset":
            self.reset()
        else:
            raise ValueError(f"unknown command type {kind!r}")
        self.applied_seq = int(cmd.get("seq", self.applied_seq))

    # -- the control loop --

    async def run_loop(self):
        cfg = self.cfg
        dt = cfg.assist.dt
        update_every = max(1, int(round(1.0 / (cfg.experiment.map_update_hz * dt))))
        tick = 0
        next_deadline = time.monotonic()
        while not self._stop.is_set():
            while not self.commands.empty():
                client_q, cmd = self.commands.get_nowait()
                try:
                    self._apply_command(cmd)
                except (ValueError, KeyError, TypeError) as exc:
                    err = {"v": PROTOCOL_VERSION, "type": "error", "message": str(exc)}
                    if client_q is not None and not client_q.full():
                        client_q.put_nowait(json.dumps(err))

            if tick % update_every == 0:
                scan = sensor_update(self.grid, self.sim.pose, cfg.obstacles,
                                     beam_count=cfg.experiment.beam_count,
                                     max_range=cfg.experiment.max_range)
                if scan.changed_cells > 0:
                    self.grid = scan.grid
                    self._reinflate()

            decision = assist_step(self.sim.pose, self.joystick, self.costmap,
                                   self.bounds, cfg.tube, cfg.assist,
                                   gains=cfg.gains, limits=cfg.limits,
                                   weights=cfg.weights, rng=self.rng_plan)
            self.emergency = decision.emergency
            if not self.paused:
                step = step_true(self.sim, decision.command, cfg.disturbance, dt,
                                 rng=self.rng_sim)
                self.sim = step.state
                if len(cfg.obstacles) and float(
                        cfg.obstacles.distance(self.sim.pose.position[None])[0]) <= cfg.experiment.r_ego:
                    self.contacts += 1

            self.seq += 1
            state = {
                "v": PROTOCOL_VERSION, "type": "state", "seq": self.seq,
                "clock": round(self.sim.clock, 6),
                "pose": [self.sim.pose.x, self.sim.pose.y, self.sim.pose.theta],
                "mode": decision.mode,
                "applied_seq": self.applied_seq,
                "command": [decision.command.v, decision.command.omega],
                "joystick": [self.joystick.v_joy, self.joystick.omega_joy],
                "joy_traj": decision.projected[:, :2].round(4).tolist(),
                "plan": (decision.plan.states[:, :2].round(4).tolist()
                         if decision.plan is not None else None),
                "costs": {"threshold": decision.joystick_cost,
                          "plan": decision.plan.total_cost if decision.plan else None,
                          "lethal": self.costmap.lethal_threshold},
                "r0": self.r0, "r_dt": self.r_dt, "n_eps": self.n_eps,
                "epsilon": self.epsilon,
                "emergency": self.emergency,
                "paused": self.paused,
                "contacts": self.contacts,
                "map_version": self.map_version,
            }
            self._broadcast(state)

            tick += 1
            if cfg.serve.realtime:
                next_deadline += 1.0 / cfg.serve.hz
                delay = next_deadline - time.monotonic()
                if delay > 0:
                    await asyncio.sleep(delay)
                else:
                    next_deadline = time.monotonic()
            else:
                await asyncio.sleep(0)

    def stop(self):
        self._stop.set()

    # -- session plumbing --

    def attach(self) -> asyncio.Queue:
        q = asyncio.Queue(maxsize=CLIENT_QUEUE_SIZE)
        hello = {
            "v": PROTOCOL_VERSION, "type": "hello",
            "map": {"height": self.cfg.geometry.height, "width": self.cfg.geometry.width,
                    "resolution": self.cfg.geometry.resolution,
                    "origin": list(self.cfg.geometry.origin)},
            "limits": {"v_max": self.cfg.limits.v_max, "omega_max": self.cfg.limits.omega_max},
            "r_ego": self.cfg.experiment.r_ego,
            "soft_scale": self.soft_scale,
        }
        q.put_nowait(json.dumps(hello))
        q.put_nowait(json.dumps(self._map_message(full=True)))
        self.clients.append(q)
        return q

    def detach(self, q: asyncio.Queue):
        if q in self.clients:
            self.clients.remove(q)


def build_app(server: AssistServer) -> FastAPI:
    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(app):
        task = asyncio.create_task(server.run_loop())
        yield
        server.stop()
        task.cancel()

    app = FastAPI(title="safenav assist service", lifespan=lifespan)
    app.state.server = server

    @app.get("/")
    async def info():
        return {"service": "safenav-assist", "protocol": PROTOCOL_VERSION,
                "clients": len(server.clients)}

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        out_q = server.attach()

        async def pump_out():
            while True:
                await ws.send_text(await out_q.get())

        sender = asyncio.create_task(pump_out())
        try:
            while True:
                raw = await ws.receive_text()
                try:
                    cmd = json.loads(raw)
                    if not isinstance(cmd, dict):
                        raise ValueError("command must be a JSON object")
                except ValueError as exc:
                    err = {"v": PROTOCOL_VERSION, "type": "error",
                           "message": f"malformed message: {exc}"}
                    await ws.send_text(json.dumps(err))
                    continue
                server.commands.put_nowait((out_q, cmd))
        except WebSocketDisconnect:
            pass
        finally:
            sender.cancel()
            server.detach(out_q)

    return app


def serve(cfg: RunConfig, bounds: DiscrepancyBounds, port: int,
          scores_path=None) -> int:
    """Run the service until interrupted. Returns a process exit code."""
    import uvicorn

    matched = unmatched = None
    if scores_path is not None:
        data = np.loadtxt(scores_path, delimiter=",", skiprows=1, ndmin=2)
        matched, unmatched = data[:, 0], data[:, 1]
    server = AssistServer(cfg, bounds, matched, unmatched)
    app = build_app(server)
    config = uvicorn.Config(app, host="127.0.0.1", port=port, log_level="warning")
    try:
        uvicorn.Server(config).run()
    except SystemExit as exc:
        return int(exc.code or 0)
    except OSError as exc:
        print(f"cannot listen on port {port}: {exc}")
        return 1
    return 0
