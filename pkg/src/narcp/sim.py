"""Planar pursuit-evasion simulator stepped at a fixed rate.

The pursuer is a unicycle (heading + forward speed). The target either flies
straight or circles at a fixed angular rate. All kinematics run on numpy arrays
so the scalar API (``reset``/``step``/``peek``) and the vectorized training
path (:class:`SimBatch`) share one code path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any

import numpy as np

from . import kernels

TASKS = ("direction", "distance", "integrated")
COLORS = ("red", "green", "blue", "yellow", "white", "black")

TURN_HARD = 0.52  # rad/s
TURN_SOFT = 0.17  # rad/s
SPEED_DELTA = 0.5  # m/s per command-second
SPEED_GAIN = 0.5  # speed autopilot gain, 1/s

DIRECTION_ACTIONS = (
    ("turn hard left", TURN_HARD),
    ("turn soft left", TURN_SOFT),
    ("hold heading", 0.0),
    ("turn soft right", -TURN_SOFT),
    ("turn hard right", -TURN_HARD),
)
DISTANCE_ACTIONS = (
    ("speed up", SPEED_DELTA),
    ("slow down", -SPEED_DELTA),
    ("hold speed", 0.0),
)


class ConfigError(ValueError):
    """Invalid scenario or trainer configuration; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class ActionError(ValueError):
    pass


@dataclass(frozen=True)
class TargetStrategy:
    kind: str = "straight"
    circular_radius: float = 10.0
    angular_rate: float = 0.3

    def __post_init__(self):
        if self.kind not in ("straight", "circular"):
            raise ConfigError("target_strategy.kind", f"unknown strategy {self.kind!r}")
        if self.kind == "circular":
            if not self.circular_radius > 0:
                raise ConfigError("target_strategy.circular_radius", "must be > 0")
            if not math.isfinite(self.angular_rate):
                raise ConfigError("target_strategy.angular_rate", "must be finite")


@dataclass(frozen=True)
class ScenarioConfig:
    task: str = "direction"
    target_distance_d_star: float = 5.0
    dt: float = 0.1
    episode_length: int = 200
    target_strategy: TargetStrategy = field(default_factory=TargetStrategy)
    randomize_distance: bool = False
    nuisance_color: str | None = None
    seed: int = 0
    target_speed: float = 3.0
    v_min: float = 0.0
    v_max: float = 8.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError("task", f"must be one of {TASKS}, got {self.task!r}")
        if not self.target_distance_d_star > 0:
            raise ConfigError("target_distance_d_star", "must be > 0")
        if not self.dt > 0:
            raise ConfigError("dt", "must be > 0")
        if int(self.episode_length) != self.episode_length or self.episode_length < 1:
            raise ConfigError("episode_length", "must be a positive integer")
        if not isinstance(self.target_strategy, TargetStrategy):
            raise ConfigError("target_strategy", "must be a TargetStrategy")
        if self.nuisance_color is not None and self.nuisance_color not in COLORS + ("random",):
            raise ConfigError("nuisance_color", f"must be one of {COLORS} or 'random'")
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be a 64-bit non-negative integer")
        if not 0 <= self.v_min <= self.v_max:
            raise ConfigError("v_min", "need 0 <= v_min <= v_max")
        if self.target_speed < 0:
            raise ConfigError("target_speed", "must be >= 0")

    @property
    def target_speed_effective(self) -> float:
        ts = self.target_strategy
        if ts.kind == "circular":
            return ts.circular_radius * abs(ts.angular_rate)
        return self.target_speed

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ScenarioConfig":
        """Build from a plain mapping; unknown keys are an error."""
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown scenario key")
        kw = dict(data)
        if "target_strategy" in kw:
            ts = kw["target_strategy"]
            if isinstance(ts, dict):
                tknown = {f.name for f in fields(TargetStrategy)}
                for key in ts:
                    if key not in tknown:
                        raise ConfigError(f"target_strategy.{key}", "unknown key")
                kw["target_strategy"] = TargetStrategy(**ts)
        for name in ("target_distance_d_star", "dt", "target_speed", "v_min", "v_max"):
            if name in kw:
                try:
                    kw[name] = float(kw[name])
                except (TypeError, ValueError):
                    raise ConfigError(name, "must be a number") from None
        return cls(**kw)

    def to_dict(self) -> dict[str, Any]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["target_strategy"] = {f.name: getattr(self.target_strategy, f.name)
                                  for f in fields(TargetStrategy)}
        return out


@dataclass(frozen=True)
class SimState:
    pursuer_pos: tuple[float, float]
    pursuer_heading: float
    pursuer_speed: float
    target_pos: tuple[float, float]
    target_heading: float
    target_speed: float
    step_index: int
    d_star: float
    rng_state: dict = field(default_factory=dict, repr=False)
    color: str | None = None


@dataclass(frozen=True)
class GeometrySummary:
    distance: float
    u_los: tuple[float, float]
    u_heading: tuple[float, float]
    e_dir: float
    distance_error: float
    bearing: float  # LOS angle relative to pursuer heading, [-pi, pi)
    closing_speed: float
    degenerate: bool


def action_space(task: str) -> tuple[str, ...]:
    if task == "direction":
        return tuple(s for s, _ in DIRECTION_ACTIONS)
    if task == "distance":
        return tuple(s for s, _ in DISTANCE_ACTIONS)
    if task == "integrated":
        return tuple(f"{a} and {b}" for a, _ in DIRECTION_ACTIONS for b, _ in DISTANCE_ACTIONS)
    raise ConfigError("task", f"unknown task {task!r}")


def action_controls(task: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-action (turn_rate, speed_delta) arrays in canonical order."""
    turns = np.array([w for _, w in DIRECTION_ACTIONS])
    deltas = np.array([dv for _, dv in DISTANCE_ACTIONS])
    if task == "direction":
        return turns, np.zeros_like(turns)
    if task == "distance":
        return np.zeros_like(deltas), deltas
    if task == "integrated":
        return np.repeat(turns, len(deltas)), np.tile(deltas, len(turns))
    raise ConfigError("task", f"unknown task {task!r}")


def _check_action(task: str, action) -> int:
    n = len(action_space(task))
    if isinstance(action, str):
        try:
            return action_space(task).index(action)
        except ValueError:
            raise ActionError(f"action {action!r} not in the {task} action space") from None
    if isinstance(action, (bool, np.bool_)) or not isinstance(action, (int, np.integer)):
        raise ActionError(f"action must be an index or surface string, got {action!r}")
    if not 0 <= action < n:
        raise ActionError(f"action index {action} out of range for task {task} ({n} actions)")
    return int(action)


# ---------------------------------------------------------------------------
# vectorized core


@dataclass
class SimBatch:
    """Struct-of-arrays state for ``n`` independent environments."""

    px: np.ndarray
    py: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    tx: np.ndarray
    ty: np.ndarray
    theading: np.ndarray
    tspeed: np.ndarray
    d_star: np.ndarray
    step_index: np.ndarray

    @property
    def n(self) -> int:
        return self.px.shape[0]

    def copy(self) -> "SimBatch":
        return SimBatch(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, idx) -> "SimBatch":
        return SimBatch(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def put(self, idx, other: "SimBatch") -> None:
        for f in fields(self):
            getattr(self, f.name)[np.atleast_1d(idx)] = getattr(other, f.name)


def batch_geometry(b: SimBatch) -> dict[str, np.ndarray]:
    """Geometry arrays for every environment in the batch."""
    dx = b.tx - b.px
    dy = b.ty - b.py
    d = np.hypot(dx, dy)
    degenerate = d == 0.0
    safe = np.where(degenerate, 1.0, d)
    ux = np.where(degenerate, np.cos(b.heading), dx / safe)
    uy = np.where(degenerate, np.sin(b.heading), dy / safe)
    hx, hy = np.cos(b.heading), np.sin(b.heading)
    e_dir = np.where(degenerate, 0.0, np.hypot(hx - ux, hy - uy))
    los = np.arctan2(uy, ux)
    bearing = kernels.wrap_angle(los - b.heading)
    # closing speed = -d/dt of range
    rvx = b.tspeed * np.cos(b.theading) - b.speed * hx
    rvy = b.tspeed * np.sin(b.theading) - b.speed * hy
    closing = -(rvx * ux + rvy * uy)
    return {
        "distance": d,
        "ux": ux,
        "uy": uy,
        "hx": hx,
        "hy": hy,
        "e_dir": e_dir,
        "distance_error": d - b.d_star,
        "bearing": np.asarray(bearing, dtype=np.float64),
        "los": los,
        "closing_speed": closing,
        "degenerate": degenerate,
    }


def _advance_target(b: SimBatch, config: ScenarioConfig):
    ts = config.target_strategy
    if ts.kind == "circular":
        th = np.asarray(kernels.wrap_angle(b.theading + ts.angular_rate * config.dt), dtype=np.float64)
    else:
        th = b.theading
    tx = b.tx + b.tspeed * np.cos(th) * config.dt
    ty = b.ty + b.tspeed * np.sin(th) * config.dt
    return tx, ty, th


def _pursuer_controls(b: SimBatch, task: str, turn: np.ndarray, delta: np.ndarray, config):
    """Apply the task autopilot to the uncontrolled channel.

    Direction task: speed is set by a proportional range-keeping autopilot.
    Distance task: heading snaps to the line of sight before the speed command.
    Returns (heading, speed, turn, delta) with broadcastable shapes.
    """
    heading = b.heading
    speed = b.speed
    if task == "direction":
        d = np.hypot(b.tx - b.px, b.ty - b.py)
        speed = np.clip(b.tspeed + SPEED_GAIN * (d - b.d_star), config.v_min, config.v_max)
    elif task == "distance":
        dx, dy = b.tx - b.px, b.ty - b.py
        heading = np.where((dx == 0) & (dy == 0), b.heading, np.arctan2(dy, dx))
    return heading, speed, turn, delta


def batch_step(b: SimBatch, actions: np.ndarray, config: ScenarioConfig, task: str | None = None) -> SimBatch:
    """Advance every environment by one step; returns a new batch."""
    task = task or config.task
    turns, deltas = action_controls(task)
    actions = np.asarray(actions, dtype=np.int64)
    heading, speed, turn, delta = _pursuer_controls(b, task, turns[actions], deltas[actions], config)
    px, py, h, v = kernels.unicycle_advance(
        b.px, b.py, heading, speed, turn, delta, config.dt, config.v_min, config.v_max
    )
    tx, ty, th = _advance_target(b, config)
    return SimBatch(px=px, py=py, heading=h, speed=v, tx=tx, ty=ty, theading=th,
                    tspeed=b.tspeed.copy(), d_star=b.d_star.copy(), step_index=b.step_index + 1)


def batch_peek_all(b: SimBatch, config: ScenarioConfig, task: str | None = None) -> SimBatch:
    """Successor of every (environment, action) pair, shaped ``(n, n_actions)``.

    Pure: the input batch is not modified.
    """
    task = task or config.task
    turns, deltas = action_controls(task)
    n, a = b.n, turns.shape[0]
    heading, speed, _, _ = _pursuer_controls(b, task, turns, deltas, config)
    col = lambda x: np.broadcast_to(np.asarray(x, dtype=np.float64).reshape(n, 1), (n, a))
    px, py, h, v = kernels.unicycle_advance(
        col(b.px), col(b.py), col(heading), col(speed),
        np.broadcast_to(turns, (n, a)), np.broadcast_to(deltas, (n, a)),
        config.dt, config.v_min, config.v_max,
    )
    tx, ty, th = _advance_target(b, config)
    return SimBatch(px=px, py=py, heading=h, speed=v, tx=col(tx).copy(), ty=col(ty).copy(),
                    theading=col(th).copy(), tspeed=col(b.tspeed).copy(),
                    d_star=col(b.d_star).copy(), step_index=col(b.step_index + 1).astype(np.int64))


def spawn(config: ScenarioConfig, rng: np.random.Generator, n: int = 1) -> SimBatch:
    """Draw ``n`` initial states from the spawn distribution."""
    if config.randomize_distance:
        d_star = rng.uniform(3.0, 12.0, size=n)
    else:
        d_star = np.full(n, float(config.target_distance_d_star))
    dist = rng.uniform(0.8, 1.2, size=n) * d_star
    bearing = rng.uniform(-math.pi / 4, math.pi / 4, size=n)
    offset = rng.uniform(-math.pi / 4, math.pi / 4, size=n)
    tspeed = np.full(n, config.target_speed_effective)
    theading = np.asarray(kernels.wrap_angle(bearing + offset), dtype=np.float64)
    return SimBatch(
        px=np.zeros(n), py=np.zeros(n), heading=np.zeros(n),
        speed=np.clip(tspeed, config.v_min, config.v_max),
        tx=dist * np.cos(bearing), ty=dist * np.sin(bearing),
        theading=theading, tspeed=tspeed, d_star=d_star,
        step_index=np.zeros(n, dtype=np.int64),
    )


def draw_color(config: ScenarioConfig, rng: np.random.Generator) -> str | None:
    if config.nuisance_color == "random":
        return COLORS[int(rng.integers(len(COLORS)))]
    return config.nuisance_color


# ---------------------------------------------------------------------------
# scalar API


def to_batch(state: SimState) -> SimBatch:
    one = lambda x: np.array([x], dtype=np.float64)
    return SimBatch(
        px=one(state.pursuer_pos[0]), py=one(state.pursuer_pos[1]),
        heading=one(state.pursuer_heading), speed=one(state.pursuer_speed),
        tx=one(state.target_pos[0]), ty=one(state.target_pos[1]),
        theading=one(state.target_heading), tspeed=one(state.target_speed),
        d_star=one(state.d_star), step_index=np.array([state.step_index], dtype=np.int64),
    )


def from_batch(b: SimBatch, i: int = 0, rng_state: dict | None = None, color=None) -> SimState:
    return SimState(
        pursuer_pos=(float(b.px[i]), float(b.py[i])),
        pursuer_heading=float(b.heading[i]),
        pursuer_speed=float(b.speed[i]),
        target_pos=(float(b.tx[i]), float(b.ty[i])),
        target_heading=float(b.theading[i]),
        target_speed=float(b.tspeed[i]),
        step_index=int(b.step_index[i]),
        d_star=float(b.d_star[i]),
        rng_state=rng_state if rng_state is not None else {},
        color=color,
    )


def reset(config: ScenarioConfig, rng: np.random.Generator | None = None) -> SimState:
    """Spawn an episode. Deterministic given ``config.seed`` when ``rng`` is omitted."""
    if not isinstance(config, ScenarioConfig):
        raise ConfigError("config", "expected a ScenarioConfig")
    if rng is None:
        rng = np.random.default_rng(config.seed)
    b = spawn(config, rng, 1)
    color = draw_color(config, rng)
    return from_batch(b, 0, rng_state=rng.bit_generator.state, color=color)


def step(state: SimState, action, config: ScenarioConfig) -> SimState:
    """Advance one tick of ``config.dt`` seconds."""
    idx = _check_action(config.task, action)
    nb = batch_step(to_batch(state), np.array([idx]), config)
    return from_batch(nb, 0, rng_state=state.rng_state, color=state.color)


def peek(state: SimState, action, config: ScenarioConfig) -> SimState:
    """Successor ``step`` would produce. States are immutable, so this is pure."""
    return step(state, action, config)


def geometry(state: SimState) -> GeometrySummary:
    g = batch_geometry(to_batch(state))
    return GeometrySummary(
        distance=float(g["distance"][0]),
        u_los=(float(g["ux"][0]), float(g["uy"][0])),
        u_heading=(float(g["hx"][0]), float(g["hy"][0])),
        e_dir=float(g["e_dir"][0]),
        distance_error=float(g["distance_error"][0]),
        bearing=float(g["bearing"][0]),
        closing_speed=float(g["closing_speed"][0]),
        degenerate=bool(g["degenerate"][0]),
    )


def with_fields(state: SimState, **kw) -> SimState:
    return replace(state, **kw)
