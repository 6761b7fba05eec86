"""Web service for playing the cooperation game live.

A session owns one authoritative simulation: the connected human supplies
tilt commands over a WebSocket, the learning robot supplies the other
half, and the training loop advances one iteration per episode exactly as
in batch runs. Board states stream out every tick; field heatmaps and
metrics go out once per iteration boundary. The client's `stop` ends
training, freezes the policy, and runs one scored validation episode.

Messages are JSON objects with a `type` tag, the session id, and a
per-session monotonic `seq`. Client to server:

  hello         {protocol}                    handshake, replies phase+state
  human_action  {roll, pitch}                 tilt-rate command in [-1, 1]
  stop          {}                            end training, start validation

Server to client:

  state    {x, y, vx, vy, roll, pitch, step, iteration}
  field    {kind, resolution, bounds, values, iteration, checksum}
  metrics  {specificity, path_length, density_ratio, human_effort,
            agreement_ratio, mean_x, mean_y, iteration, final}
  phase    {phase, validating}
  error    {code, detail}

Field values are row-major over the session grid (length nx*ny) and the
checksum is the sha256 of the canonical text dump, so a heatmap received
on the wire can be verified against batch-run snapshot files.
"""
from __future__ import annotations

import asyncio
import contextlib
import itertools
import json
from collections import deque
from typing import Literal

from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from pydantic import BaseModel, ValidationError

from .board import (ActionPair, BoardConfig, BoardState, Trajectory,
                    TrajectoryRecord, initial_state, step)
from .grids import GoalGrid, field_checksum
from .harness import EXPERIMENT_GRID_RESOLUTION, board_for, ppo_config_for
from .metrics import compute_metrics
from .ppo import PpoPolicy
from .reward import RewardConfig
from .training import (CooperativeTrainer, DeterministicRobot,
                       TrainingConfig, _episode_seed)

PROTOCOL_VERSION = 1
PHASES = ("collecting", "updating", "idle", "stopped")

_CLAMP_LO, _CLAMP_HI = -1.0, 1.0


class ClientHello(BaseModel):
    type: Literal["hello"]
    session: str
    seq: int
    protocol: int


class ClientAction(BaseModel):
    type: Literal["human_action"]
    session: str
    seq: int
    roll: float
    pitch: float


class ClientStop(BaseModel):
    type: Literal["stop"]
    session: str
    seq: int


_CLIENT_TYPES = {"hello": ClientHello, "human_action": ClientAction,
                 "stop": ClientStop}


class StateMessage(BaseModel):
    type: Literal["state"] = "state"
    session: str
    seq: int
    x: float
    y: float
    vx: float
    vy: float
    roll: float
    pitch: float
    step: int
    iteration: int


class FieldMessage(BaseModel):
    type: Literal["field"] = "field"
    session: str
    seq: int
    kind: str
    resolution: tuple[int, int]
    bounds: tuple[float, float, float, float]
    values: list[float]
    iteration: int
    checksum: str


class MetricsMessage(BaseModel):
    type: Literal["metrics"] = "metrics"
    session: str
    seq: int
    iteration: int
    final: bool
    specificity: float
    path_length: float
    density_ratio: float
    human_effort: float
    agreement_ratio: float
    mean_x: float
    mean_y: float


class PhaseMessage(BaseModel):
    type: Literal["phase"] = "phase"
    session: str
    seq: int
    phase: str
    validating: bool


class ErrorMessage(BaseModel):
    type: Literal["error"] = "error"
    session: str
    seq: int
    code: str
    detail: str


class SessionInfo(BaseModel):
    """REST view of one live session."""

    session: str
    environment: str
    preset: str
    protocol: int
    phase: str
    validating: bool
    iteration: int
    step: int
    connected_clients: int
    clamped_commands: int
    dropped_out_of_order: int
    last_applied: tuple[float, float]
    stop_reason: str
    snapshot_ids: dict[str, str]


class OpenSessionRequest(BaseModel):
    environment: Literal["env1", "env2"] | None = None
    preset: Literal["sim", "physical"] | None = None


class ClientFeed:
    """Outbound queue for one client; ticks never block on it.

    Only `state` messages are subject to the capacity: when the backlog
    of states reaches the cap, the oldest state is discarded. Field,
    metrics, phase, and error messages are always retained in order.
    """

    def __init__(self, state_capacity: int = 256):
        if state_capacity < 1:
            raise ValueError("state_capacity must be at least 1")
        self.state_capacity = state_capacity
        self.dropped_states = 0
        self._items: deque[dict] = deque()
        self._states = 0
        self._wakeup = asyncio.Event()

    def __len__(self) -> int:
        return len(self._items)

    def put(self, message: dict) -> None:
        if message["type"] == "state":
            if self._states >= self.state_capacity:
                for i, queued in enumerate(self._items):
                    if queued["type"] == "state":
                        del self._items[i]
                        self._states -= 1
                        self.dropped_states += 1
                        break
            self._states += 1
        self._items.append(message)
        self._wakeup.set()

    def pop(self) -> dict | None:
        if not self._items:
            return None
        message = self._items.popleft()
        if message["type"] == "state":
            self._states -= 1
        return message

    async def get(self) -> dict:
        while True:
            message = self.pop()
            if message is not None:
                return message
            self._wakeup.clear()
            await self._wakeup.wait()


class LiveSession:
    """One authoritative simulation plus the protocol state around it.

    All mutation happens through `ingest`, `tick`, and `process_pending`;
    the network layer only moves messages. `tick` does pure bookkeeping
    and physics, so it is safe to call at real-time cadence, while the
    posterior/feature/reward refresh sits in `process_pending` for the
    caller to run off the tick path. The refreshed reward only takes
    effect at the next episode start.
    """

    def __init__(self, session_id: str, environment: str, preset: str,
                 seed: int = 0, max_iterations: int = 40,
                 grid_resolution: int = EXPERIMENT_GRID_RESOLUTION,
                 episode_steps: int | None = None):
        self.session_id = session_id
        self.environment = environment
        self.preset = preset
        self.seed = seed
        board = board_for(environment, preset)
        if episode_steps is not None:
            board = BoardConfig.preset(
                environment, preset, episode_steps=episode_steps)
        self.board_cfg = board
        grid = GoalGrid.for_board(board, resolution=grid_resolution)
        policy = PpoPolicy(ppo_config_for(preset), seed=seed)
        self.trainer = CooperativeTrainer(
            board, grid, policy, RewardConfig(mode="evl"),
            TrainingConfig(max_iterations=max_iterations,
                           keep_trajectories=True))

        self.phase = "collecting"
        self.validating = False
        self.state = initial_state(board)
        self.clamped_commands = 0
        self.dropped_out_of_order = 0
        self.snapshot_ids: dict[str, str] = {}
        # (iteration, episode step, applied command) per executed tick
        self.tick_log: list[tuple[int, int, tuple[float, float]]] = []

        self._feeds: list[ClientFeed] = []
        self._seq = itertools.count()
        self._last_action_seq = -1
        self._held = (0.0, 0.0)
        self._pending_cmd: tuple[float, float] | None = None
        self._records: list[TrajectoryRecord] = []
        self._robot = None
        self._pending_trajectory: Trajectory | None = None
        self._stop_requested = False
        self._begin_episode()

    # -- client plumbing ------------------------------------------------

    def attach(self, feed: ClientFeed) -> None:
        self._feeds.append(feed)

    def detach(self, feed: ClientFeed) -> None:
        if feed in self._feeds:
            self._feeds.remove(feed)

    @property
    def connected_clients(self) -> int:
        return len(self._feeds)

    def broadcast(self, messages: list[dict]) -> None:
        for message in messages:
            for feed in self._feeds:
                feed.put(message)

    def _stamp(self, model_cls, **payload) -> dict:
        return model_cls(session=self.session_id, seq=next(self._seq),
                         **payload).model_dump()

    def _error(self, code: str, detail: str) -> dict:
        return self._stamp(ErrorMessage, code=code, detail=detail)

    def _phase_message(self) -> dict:
        return self._stamp(PhaseMessage, phase=self.phase,
                           validating=self.validating)

    def _state_message(self) -> dict:
        s = self.state
        return self._stamp(StateMessage, x=s.x, y=s.y, vx=s.vx, vy=s.vy,
                           roll=s.roll, pitch=s.pitch, step=s.step_index,
                           iteration=self.trainer.iteration)

    def _metrics_message(self, record, final: bool) -> dict:
        return self._stamp(
            MetricsMessage, iteration=record.iteration_index, final=final,
            specificity=record.specificity, path_length=record.path_length,
            density_ratio=record.density_ratio,
            human_effort=record.human_effort,
            agreement_ratio=record.agreement_ratio,
            mean_x=record.mean_x, mean_y=record.mean_y)

    def _field_messages(self, snapshots: dict, iteration: int) -> list[dict]:
        grid = self.trainer.grid
        out = []
        self.snapshot_ids = {}
        for kind in sorted(snapshots):
            values = snapshots[kind]
            checksum = field_checksum(kind, grid, values, iteration)
            self.snapshot_ids[kind] = checksum
            out.append(self._stamp(
                FieldMessage, kind=kind, resolution=(grid.nx, grid.ny),
                bounds=grid.bounds(), values=[float(v) for v in values],
                iteration=iteration, checksum=checksum))
        return out

    def info(self) -> SessionInfo:
        reason = self.trainer.stop_reason
        if self._stop_requested and reason == "running":
            reason = "human_stop"
        return SessionInfo(
            session=self.session_id, environment=self.environment,
            preset=self.preset, protocol=PROTOCOL_VERSION, phase=self.phase,
            validating=self.validating, iteration=self.trainer.iteration,
            step=self.state.step_index,
            connected_clients=self.connected_clients,
            clamped_commands=self.clamped_commands,
            dropped_out_of_order=self.dropped_out_of_order,
            last_applied=self._held, stop_reason=reason,
            snapshot_ids=dict(self.snapshot_ids))

    # -- inbound --------------------------------------------------------

    def ingest(self, raw: dict, feed: ClientFeed) -> None:
        """Apply one client message; every message gets an effect or a
        typed error on the sender's feed."""
        model_cls = _CLIENT_TYPES.get(raw.get("type"))
        if model_cls is None:
            feed.put(self._error(
                "unknown_type", f"unsupported message type {raw.get('type')!r}"))
            return
        try:
            message = model_cls.model_validate(raw)
        except ValidationError as exc:
            first = exc.errors()[0]
            feed.put(self._error(
                "invalid_message",
                f"{message_field(first)}: {first['msg']}"))
            return
        if message.session != self.session_id:
            feed.put(self._error(
                "session_mismatch",
                f"message addressed to {message.session!r}"))
            return
        if isinstance(message, ClientHello):
            self._on_hello(message, feed)
        elif isinstance(message, ClientAction):
            self._on_action(message, feed)
        else:
            self._on_stop(feed)

    def _on_hello(self, message: ClientHello, feed: ClientFeed) -> None:
        if message.protocol != PROTOCOL_VERSION:
            feed.put(self._error(
                "protocol_mismatch",
                f"server speaks protocol {PROTOCOL_VERSION}, "
                f"client sent {message.protocol}"))
            return
        feed.put(self._phase_message())
        feed.put(self._state_message())

    def _on_action(self, message: ClientAction, feed: ClientFeed) -> None:
        if message.seq <= self._last_action_seq:
            self.dropped_out_of_order += 1
            return
        self._last_action_seq = message.seq
        if self.phase != "collecting":
            feed.put(self._error(
                "not_collecting", f"session phase is {self.phase}"))
            return
        roll = min(max(message.roll, _CLAMP_LO), _CLAMP_HI)
        pitch = min(max(message.pitch, _CLAMP_LO), _CLAMP_HI)
        if (roll, pitch) != (message.roll, message.pitch):
            self.clamped_commands += 1
        self._pending_cmd = (roll, pitch)

    def _on_stop(self, feed: ClientFeed) -> None:
        if self.phase == "stopped":
            feed.put(self._error("already_stopped", "session has ended"))
            return
        if self.validating:
            feed.put(self._error(
                "already_stopping", "validation episode in progress"))
            return
        self._stop_requested = True
        if self.phase == "collecting":
            # abandon the partial episode; nothing is learned from it
            self._begin_validation()
            self.broadcast([self._phase_message()])
        # during an update the flag is honored once the update lands

    # -- simulation -----------------------------------------------------

    def _begin_episode(self) -> None:
        ep_seed = _episode_seed(self.seed, self.trainer.iteration)
        self._robot = self.trainer.robot_policy()
        self._robot.begin_episode(2 * ep_seed + 1)
        self.state = initial_state(self.board_cfg)
        self._records = []

    def _begin_validation(self) -> None:
        self.validating = True
        self.phase = "collecting"
        self._robot = DeterministicRobot(self.trainer.policy)
        self.state = initial_state(self.board_cfg)
        self._records = []
        self._pending_cmd = None

    def has_pending_update(self) -> bool:
        return self._pending_trajectory is not None

    def tick(self) -> None:
        """Advance the simulation one step and broadcast the new state."""
        if self.phase != "collecting":
            return
        if self._pending_cmd is not None:
            self._held = self._pending_cmd
            self._pending_cmd = None
        actions = ActionPair(human=self._held,
                             robot=tuple(self._robot(self.state)))
        nxt = step(self.state, actions, self.board_cfg)
        self._records.append(
            TrajectoryRecord(self.state.step_index, self.state, actions))
        self.tick_log.append((self.trainer.iteration,
                              self.state.step_index, self._held))
        self.state = nxt
        self.broadcast([self._state_message()])
        if nxt.terminated != "none":
            self._end_episode()

    def _end_episode(self) -> None:
        trajectory = Trajectory(
            records=tuple(self._records), termination=self.state.terminated,
            final_state=self.state, sample_time=self.board_cfg.sample_time)
        self._records = []
        if self.validating:
            final = compute_metrics(trajectory,
                                    iteration_index=self.trainer.iteration)
            self.phase = "stopped"
            self.broadcast([self._metrics_message(final, final=True),
                            self._phase_message()])
            return
        self._pending_trajectory = trajectory
        self.phase = "updating"
        self.broadcast([self._phase_message()])

    def process_pending(self) -> list[dict]:
        """Run the iteration update for the last finished episode.

        Pure compute plus session bookkeeping; the caller broadcasts the
        returned messages (and may run this in a worker thread).
        """
        trajectory = self._pending_trajectory
        if trajectory is None:
            return []
        self._pending_trajectory = None
        log = self.trainer.process_episode(trajectory, recorder=self._robot)
        out: list[dict] = []
        if log.snapshots is not None:
            out.extend(self._field_messages(log.snapshots,
                                            log.iteration_index))
        out.append(self._metrics_message(log.metrics, final=False))
        if self._stop_requested or not self.trainer.should_continue():
            self._begin_validation()
        else:
            self.phase = "collecting"
            self._begin_episode()
        out.append(self._phase_message())
        return out

    def run_ticks(self, count: int) -> int:
        """Lockstep driver: tick and fold updates in synchronously."""
        executed = 0
        for _ in range(count):
            if self.phase == "stopped":
                break
            self.tick()
            if self.has_pending_update():
                self.broadcast(self.process_pending())
            executed += 1
        return executed


def message_field(error: dict) -> str:
    loc = error.get("loc") or ("message",)
    return ".".join(str(part) for part in loc)


class SessionRegistry:
    def __init__(self, max_sessions: int):
        self.max_sessions = max_sessions
        self.sessions: dict[str, LiveSession] = {}
        self._next_id = itertools.count()

    def open(self, environment: str, preset: str, **session_kwargs
             ) -> LiveSession:
        active = sum(1 for s in self.sessions.values()
                     if s.phase != "stopped")
        if active >= self.max_sessions:
            raise HTTPException(
                status_code=409,
                detail=f"session limit reached ({self.max_sessions} active)")
        session_id = f"s{next(self._next_id):04d}"
        session = LiveSession(session_id, environment, preset,
                              **session_kwargs)
        self.sessions[session_id] = session
        return session

    def get(self, session_id: str) -> LiveSession:
        session = self.sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404,
                                detail=f"no session {session_id!r}")
        return session


async def _ticker(session: LiveSession, sample_time: float) -> None:
    loop = asyncio.get_running_loop()
    while session.phase != "stopped":
        started = loop.time()
        session.tick()
        if session.has_pending_update():
            # keep the posterior/PPO work off the tick path
            messages = await asyncio.to_thread(session.process_pending)
            session.broadcast(messages)
        remaining = sample_time - (loop.time() - started)
        await asyncio.sleep(max(remaining, 0.0))


def create_app(environment: str = "env1", preset: str = "sim", *,
               lockstep: bool = False, max_sessions: int = 4,
               seed: int = 0, max_iterations: int = 40,
               grid_resolution: int = EXPERIMENT_GRID_RESOLUTION,
               episode_steps: int | None = None,
               state_queue_capacity: int = 256) -> FastAPI:
    """Build the service.

    `environment` and `preset` are the defaults new sessions use; a
    session request may override them. With `lockstep=True` no real-time
    ticker runs and POST /sessions/{id}/advance drives the simulation,
    which makes runs reproducible for tests and scripted clients.
    """
    tickers: dict[str, asyncio.Task] = {}

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        for task in tickers.values():
            task.cancel()

    app = FastAPI(title="coopball live service", lifespan=lifespan)
    registry = SessionRegistry(max_sessions)
    app.state.registry = registry
    app.state.lockstep = lockstep

    session_kwargs = dict(seed=seed, max_iterations=max_iterations,
                          grid_resolution=grid_resolution,
                          episode_steps=episode_steps)

    @app.post("/sessions", status_code=201)
    async def open_session(request: OpenSessionRequest | None = None
                           ) -> SessionInfo:
        request = request or OpenSessionRequest()
        session = registry.open(request.environment or environment,
                                request.preset or preset, **session_kwargs)
        if not lockstep:
            tickers[session.session_id] = asyncio.create_task(
                _ticker(session, session.board_cfg.sample_time))
        return session.info()

    @app.get("/sessions")
    async def list_sessions() -> list[SessionInfo]:
        return [s.info() for s in registry.sessions.values()]

    @app.get("/sessions/{session_id}")
    async def session_info(session_id: str) -> SessionInfo:
        return registry.get(session_id).info()

    @app.post("/sessions/{session_id}/advance")
    async def advance(session_id: str, ticks: int = 1) -> dict:
        if not lockstep:
            raise HTTPException(
                status_code=409,
                detail="advance is only available in lockstep mode")
        if ticks < 1:
            raise HTTPException(status_code=422,
                                detail="ticks must be at least 1")
        session = registry.get(session_id)
        executed = session.run_ticks(ticks)
        return {"ticks": executed, "phase": session.phase}

    @app.websocket("/sessions/{session_id}/ws")
    async def session_socket(websocket: WebSocket, session_id: str) -> None:
        await websocket.accept()
        session = registry.sessions.get(session_id)
        if session is None:
            await websocket.send_json(ErrorMessage(
                session=session_id, seq=0, code="unknown_session",
                detail=f"no session {session_id!r}").model_dump())
            await websocket.close()
            return
        feed = ClientFeed(state_queue_capacity)
        session.attach(feed)

        async def receive() -> None:
            while True:
                try:
                    raw = await websocket.receive_json()
                except json.JSONDecodeError:
                    feed.put(session._error("invalid_json",
                                            "message is not valid JSON"))
                    continue
                session.ingest(raw, feed)

        async def send() -> None:
            while True:
                await websocket.send_json(await feed.get())

        tasks = [asyncio.create_task(receive()),
                 asyncio.create_task(send())]
        try:
            done, _ = await asyncio.wait(
                tasks, return_when=asyncio.FIRST_COMPLETED)
            for task in done:
                exc = task.exception()
                if exc is not None and not isinstance(
                        exc, (WebSocketDisconnect, RuntimeError)):
                    raise exc
        finally:
            for task in tasks:
                task.cancel()
            session.detach(feed)

    return app
