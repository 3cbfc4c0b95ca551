"""Websocket streaming service.

Each connection owns an isolated simulation session. Clients send JSON
command objects {"id": ..., "cmd": ..., "params": {...}}; every command gets
exactly one JSON reply, an ack or an error, echoing the client id. Between
simulation steps the session drains its whole command queue, so a burst of
commands applies atomically with no step interleaved.

State frames are binary: a little-endian header

    u32 magic 0x4D4E4341, u32 step_counter, f32 steps_per_sec,
    u32 n_vertices, u32 channel_count

followed by n_vertices * channel_count little-endian float32 values laid out
as one block per extracted map, vertex-major inside each block. The pbr
layout streams albedo xyz, normal xyz, height, roughness, ao (9 channels);
colorgeo streams color xyz and displacement (4). An active graft appends one
more channel with the per-vertex graft weight. A slow client only delays its
own frames, which are dropped in favor of newer ones; commands are never
dropped.
"""

from __future__ import annotations

import asyncio
import collections
import json
import struct
import time

import numpy as np

from . import mesh as mesh_mod
from .engine import (
    ModelWeights,
    Simulation,
    apply_brush,
    make_mask_scheme,
    param_count,
)
from .model_io import load_registry

FRAME_MAGIC = 0x4D4E4341
FRAME_HEADER = struct.Struct("<IIfII")

VIS_MODES = ("color", "albedo", "normal", "height", "roughness", "ao", "graft")

COMMANDS = (
    "hello",
    "set_model",
    "set_graft_model",
    "set_mesh",
    "set_subdivision",
    "play",
    "pause",
    "reset",
    "set_speed",
    "set_orientation",
    "set_vis_mode",
    "brush",
    "query_state",
    "screenshot_request",
)

DEFAULT_SPEED = 30.0
DEFAULT_MESH = "icosphere:4"
MAX_QUERY_ROWS = 1024
BUILTIN_MESHES = tuple(f"icosphere:{level}" for level in range(7))


def build_frame(sim: Simulation, steps_per_sec: float) -> bytes:
    maps = sim.extract()
    if sim.config.layout == "pbr":
        blocks = [maps["albedo"], maps["normal"], maps["height"], maps["roughness"], maps["ao"]]
    else:
        blocks = [maps["color"], maps["displacement"]]
    if sim.graft is not None:
        blocks.append(sim.graft.alpha)
    flat = [np.ascontiguousarray(b, dtype="<f4").reshape(len(sim.mesh.positions), -1) for b in blocks]
    channel_count = sum(b.shape[1] for b in flat)
    header = FRAME_HEADER.pack(
        FRAME_MAGIC,
        sim.states.step_counter,
        steps_per_sec,
        sim.mesh.n_vertices,
        channel_count,
    )
    return header + b"".join(b.tobytes() for b in flat)


def parse_frame(blob: bytes) -> dict:
    """Decode a binary frame; the inverse of build_frame, useful for headless
    clients and tests."""
    if len(blob) < FRAME_HEADER.size:
        raise ValueError("frame shorter than header")
    magic, step_counter, steps_per_sec, n, channel_count = FRAME_HEADER.unpack_from(blob)
    if magic != FRAME_MAGIC:
        raise ValueError(f"bad frame magic {magic:#x}")
    expected = FRAME_HEADER.size + 4 * n * channel_count
    if len(blob) != expected:
        raise ValueError(f"frame payload length {len(blob)} != expected {expected}")
    payload = np.frombuffer(blob, dtype="<f4", offset=FRAME_HEADER.size)
    return {
        "step_counter": step_counter,
        "steps_per_sec": steps_per_sec,
        "n_vertices": n,
        "channel_count": channel_count,
        "payload": payload,
    }


class _Outbox:
    """Sender mailbox: text replies queue up losslessly, binary frames keep
    only the newest one."""

    def __init__(self):
        self._texts: collections.deque = collections.deque()
        self._frame: bytes | None = None
        self._event = asyncio.Event()

    def put_text(self, message: str) -> None:
        self._texts.append(message)
        self._event.set()

    def put_frame(self, frame: bytes) -> None:
        self._frame = frame
        self._event.set()

    async def get(self):
        while True:
            if self._texts:
                return self._texts.popleft()
            if self._frame is not None:
                frame = self._frame
                self._frame = None
                return frame
            self._event.clear()
            await self._event.wait()


class _StepRate:
    """Steps per second over a sliding window."""

    def __init__(self, window: float = 2.0):
        self.window = window
        self.stamps: collections.deque = collections.deque()

    def tick(self, now: float) -> None:
        self.stamps.append(now)
        cutoff = now - self.window
        while self.stamps and self.stamps[0] < cutoff:
            self.stamps.popleft()

    def rate(self) -> float:
        if len(self.stamps) < 2:
            return 0.0
        span = self.stamps[-1] - self.stamps[0]
        if span <= 0.0:
            return 0.0
        return (len(self.stamps) - 1) / span


class ServiceError(Exception):
    """Command-level failure reported to the client as an error reply."""


class Session:
    """One client's simulation and streaming state."""

    def __init__(self, registry: dict[str, ModelWeights], mesh_dir: str | None, seed: int = 0):
        self.registry = registry
        self.mesh_dir = mesh_dir
        self.seed = seed
        self.playing = False
        self.speed = DEFAULT_SPEED
        self.vis_mode = "color"
        self.mesh_name = DEFAULT_MESH
        self.commands: asyncio.Queue = asyncio.Queue()
        self.outbox = _Outbox()
        self.rate = _StepRate()
        if not registry:
            raise ValueError("service needs at least one registered model")
        first = next(iter(registry))
        self.model_name = first
        self.sim = self._make_sim(self.mesh_name, registry[first])

    def _load_mesh(self, name: str) -> mesh_mod.Mesh:
        if name.startswith("icosphere:"):
            try:
                level = int(name.split(":", 1)[1])
            except ValueError:
                raise ServiceError(f"bad icosphere level in {name!r}")
            try:
                return mesh_mod.generate_icosphere(level)
            except mesh_mod.MeshError as exc:
                raise ServiceError(str(exc))
        if self.mesh_dir is None:
            raise ServiceError(f"unknown mesh {name!r} and no mesh directory configured")
        import os

        path = os.path.join(self.mesh_dir, name)
        if not os.path.normpath(path).startswith(os.path.normpath(self.mesh_dir)):
            raise ServiceError(f"mesh name {name!r} escapes the mesh directory")
        if not os.path.exists(path):
            raise ServiceError(f"mesh file {name!r} not found")
        try:
            return mesh_mod.load_obj(path)
        except mesh_mod.MeshError as exc:
            raise ServiceError(str(exc))

    def _make_sim(self, mesh_name: str, weights: ModelWeights) -> Simulation:
        mesh = self._load_mesh(mesh_name)
        graph = mesh_mod.build_adjacency(mesh)
        return Simulation(
            mesh,
            graph,
            weights,
            mask_scheme=make_mask_scheme("bernoulli", mesh.n_vertices, self.seed),
            seed=self.seed,
        )

    def mesh_listing(self) -> list[str]:
        names = list(BUILTIN_MESHES)
        if self.mesh_dir:
            import os

            for entry in sorted(os.listdir(self.mesh_dir)):
                if entry.endswith(".obj"):
                    names.append(entry)
        return names

    def mesh_payload(self) -> dict:
        mesh = self.sim.mesh
        return {
            "name": self.mesh_name,
            "positions": mesh.positions.astype(np.float32).ravel().tolist(),
            "normals": mesh.normals.astype(np.float32).ravel().tolist(),
            "triangles": mesh.triangles.astype(np.int32).ravel().tolist(),
            "n_vertices": mesh.n_vertices,
        }

    def session_payload(self) -> dict:
        return {
            "mesh": self.mesh_name,
            "n_vertices": self.sim.mesh.n_vertices,
            "model": self.model_name,
            "graft_model": self.sim.graft.model_t.name if self.sim.graft else None,
            "playing": self.playing,
            "speed": self.speed,
            "orientation": self.sim.orientation,
            "vis_mode": self.vis_mode,
            "layout": self.sim.config.layout,
            "step_counter": self.sim.states.step_counter,
        }

    def push_frame(self) -> None:
        self.outbox.put_frame(build_frame(self.sim, self.rate.rate()))

    def _get_model(self, name) -> ModelWeights:
        if not isinstance(name, str) or name not in self.registry:
            raise ServiceError(f"unknown model {name!r}")
        return self.registry[name]

    def handle(self, cmd: str, params: dict) -> dict:
        """Apply one command; returns the ack data. Runs between steps."""
        if cmd == "hello":
            models = [
                {
                    "name": m.name,
                    "lineage_id": m.lineage_id,
                    "parent_id": m.parent_id,
                    "channels": m.config.channels,
                    "layout": m.config.layout,
                    "param_count": param_count(m.config),
                }
                for m in self.registry.values()
            ]
            return {
                "models": models,
                "meshes": self.mesh_listing(),
                "session": self.session_payload(),
                "mesh_data": self.mesh_payload(),
            }
        if cmd == "set_model":
            weights = self._get_model(params.get("name"))
            did_reset = self.sim.set_model(weights)
            self.model_name = weights.name
            self.push_frame()
            return {"name": weights.name, "reset": did_reset}
        if cmd == "set_graft_model":
            name = params.get("name")
            if name is None:
                self.sim.set_graft_model(None)
                self.push_frame()
                return {"name": None}
            weights = self._get_model(name)
            try:
                self.sim.set_graft_model(weights)
            except ValueError as exc:
                raise ServiceError(str(exc))
            self.push_frame()
            return {"name": weights.name}
        if cmd == "set_mesh":
            name = params.get("name")
            if not isinstance(name, str):
                raise ServiceError("set_mesh needs a mesh name")
            self.sim = self._make_sim(name, self.registry[self.model_name])
            self.mesh_name = name
            self.push_frame()
            return {"mesh_data": self.mesh_payload(), "session": self.session_payload()}
        if cmd == "set_subdivision":
            level = params.get("level")
            if not isinstance(level, int) or isinstance(level, bool):
                raise ServiceError("set_subdivision needs an integer level")
            return self.handle("set_mesh", {"name": f"icosphere:{level}"})
        if cmd == "play":
            self.playing = True
            return {"playing": True}
        if cmd == "pause":
            self.playing = False
            return {"playing": False}
        if cmd == "reset":
            self.sim.reset()
            self.push_frame()
            return {"step_counter": 0}
        if cmd == "set_speed":
            speed = params.get("steps_per_sec")
            if not isinstance(speed, (int, float)) or not speed > 0:
                raise ServiceError("set_speed needs steps_per_sec > 0")
            self.speed = float(speed)
            return {"steps_per_sec": self.speed}
        if cmd == "set_orientation":
            angle = params.get("radians")
            if not isinstance(angle, (int, float)) or not np.isfinite(angle):
                raise ServiceError("set_orientation needs a finite angle in radians")
            self.sim.orientation = float(angle)
            self.push_frame()
            return {"radians": self.sim.orientation}
        if cmd == "set_vis_mode":
            mode = params.get("mode")
            if mode not in VIS_MODES:
                raise ServiceError(f"vis mode must be one of {VIS_MODES}")
            self.vis_mode = mode
            return {"mode": mode}
        if cmd == "brush":
            return self._handle_brush(params)
        if cmd == "query_state":
            return self._handle_query(params)
        if cmd == "screenshot_request":
            # rendering lives client-side; the viewer captures its canvas
            return {"capture": "client"}
        raise ServiceError(f"unknown command {cmd!r}")

    def _handle_brush(self, params: dict) -> dict:
        mode = params.get("mode")
        ndc = params.get("ndc")
        radius = params.get("radius")
        camera = params.get("view_projection")
        delta = params.get("delta", 0.1)
        if mode not in ("regenerate", "graft"):
            raise ServiceError("brush mode must be 'regenerate' or 'graft'")
        if not isinstance(ndc, (list, tuple)) or len(ndc) != 2:
            raise ServiceError("brush needs ndc [x, y]")
        if not isinstance(radius, (int, float)) or not radius > 0:
            raise ServiceError("brush needs radius > 0")
        if not isinstance(camera, (list, tuple)) or len(camera) != 16:
            raise ServiceError("brush needs a 16-float row-major view_projection")
        matrix = np.asarray(camera, dtype=np.float64).reshape(4, 4)
        if mode == "graft":
            if self.sim.graft is None:
                raise ServiceError("graft brush needs an active graft model")
            target = self.sim.graft
        else:
            target = self.sim.states
        try:
            count = apply_brush(
                target,
                self.sim.mesh,
                matrix,
                np.asarray(ndc, dtype=np.float64),
                float(radius),
                mode,
                delta=float(delta),
            )
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise ServiceError(f"brush failed: {exc}")
        self.push_frame()
        return {"affected": count}

    def _handle_query(self, params: dict) -> dict:
        values = self.sim.states.values
        data: dict = {"step_counter": self.sim.states.step_counter}
        vertices = params.get("vertices")
        if vertices is None:
            data["stats"] = {
                "min": float(values.min()),
                "max": float(values.max()),
                "mean": float(values.mean()),
            }
            return data
        if not isinstance(vertices, list) or len(vertices) > MAX_QUERY_ROWS:
            raise ServiceError(f"query_state accepts up to {MAX_QUERY_ROWS} vertex ids")
        n = self.sim.mesh.n_vertices
        rows = []
        for v in vertices:
            if not isinstance(v, int) or isinstance(v, bool) or not (0 <= v < n):
                raise ServiceError(f"vertex id {v!r} out of range")
            rows.append([float(x) for x in values[v]])
        data["vertices"] = vertices
        data["values"] = rows
        return data


async def _session_loop(session: Session) -> None:
    loop = asyncio.get_running_loop()
    next_due = loop.time()
    while True:
        message = None
        if session.playing:
            now = loop.time()
            if now >= next_due:
                session.sim.step_once()
                session.rate.tick(time.monotonic())
                session.push_frame()
                next_due += 1.0 / session.speed
                if next_due < now - 0.5:  # fell far behind, e.g. after a pause
                    next_due = now
                # commands never starve, even when stepping lags the speed target
                while not session.commands.empty():
                    message = session.commands.get_nowait()
                    if message is None:
                        return
                    _process(session, message)
                continue
            try:
                message = await asyncio.wait_for(session.commands.get(), next_due - now)
            except asyncio.TimeoutError:
                continue
        else:
            message = await session.commands.get()
            next_due = loop.time()
        if message is None:
            return
        _process(session, message)


def _process(session: Session, raw) -> None:
    client_id = None
    try:
        if isinstance(raw, (bytes, bytearray)):
            raise ServiceError("binary messages are not valid commands")
        parsed = json.loads(raw)
        if not isinstance(parsed, dict):
            raise ServiceError("command must be a JSON object")
        client_id = parsed.get("id")
        cmd = parsed.get("cmd")
        params = parsed.get("params") or {}
        if not isinstance(params, dict):
            raise ServiceError("params must be an object")
        if not isinstance(cmd, str):
            raise ServiceError("missing command name")
        data = session.handle(cmd, params)
        reply = {"type": "ack", "id": client_id, "cmd": cmd, "data": data}
    except ServiceError as exc:
        reply = {"type": "error", "id": client_id, "message": str(exc)}
    except json.JSONDecodeError as exc:
        reply = {"type": "error", "id": None, "message": f"bad JSON: {exc}"}
    session.outbox.put_text(json.dumps(reply))


async def handle_connection(websocket, registry: dict[str, ModelWeights], mesh_dir: str | None):
    session = Session(registry, mesh_dir)
    loop_task = asyncio.create_task(_session_loop(session))

    async def sender():
        while True:
            await websocket.send(await session.outbox.get())

    sender_task = asyncio.create_task(sender())
    try:
        async for message in websocket:
            session.commands.put_nowait(message)
    except Exception:
        pass
    finally:
        session.commands.put_nowait(None)
        await loop_task
        sender_task.cancel()
        try:
            await sender_task
        except (asyncio.CancelledError, Exception):
            pass


async def start_server(host: str, port: int, registry: dict[str, ModelWeights], mesh_dir: str | None = None):
    """Bind and return the websocket server; callers close it when done."""
    from websockets.asyncio.server import serve

    async def handler(websocket):
        await handle_connection(websocket, registry, mesh_dir)

    return await serve(handler, host, port, max_size=None)


async def serve_forever(host: str, port: int, registry_path: str, mesh_dir: str | None = None):
    registry = load_registry(registry_path)
    server = await start_server(host, port, registry, mesh_dir)
    bound = ", ".join(str(sock.getsockname()) for sock in server.sockets)
    print(f"serving {len(registry)} models on {bound}")
    await server.wait_closed()
