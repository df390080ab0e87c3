"""Multi-agent kinematic highway world.

Vehicles follow a unicycle model driven by ``(accel, yaw_rate)`` actions.
Lanes are straight and parallel to the x-axis; lane ``i`` has its centreline
at ``y = (i + 0.5) * lane_width``.
"""

from __future__ import annotations

import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .trajectory import History, Trajectory

__all__ = [
    "SimError",
    "VehicleState",
    "LaneGeometry",
    "WorldState",
    "ObservationSpec",
    "ExpertConfig",
    "wrap_angle",
    "kinematic_step",
    "step_states",
    "observe",
    "observe_all",
    "generate_expert",
    "rollout",
    "Policy",
    "ZeroActionPolicy",
    "ReplayPolicy",
]


class SimError(ValueError):
    pass


def wrap_angle(theta):
    """Map angles to ``(-pi, pi]``."""
    w = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    v: float

    def __post_init__(self):
        if self.v < 0:
            raise SimError(f"speed must be non-negative, got {self.v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.v])

    @classmethod
    def from_array(cls, a) -> "VehicleState":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


def step_states(states: np.ndarray, actions: np.ndarray, dt: float) -> np.ndarray:
    """Vectorised explicit-Euler unicycle update for ``states (N, 4)``, ``actions (N, 2)``."""
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if not dt > 0:
        raise SimError(f"dt must be positive, got {dt}")
    if not np.all(np.isfinite(actions)):
        raise SimError("non-finite action")
    x, y, th, v = states[..., 0], states[..., 1], states[..., 2], states[..., 3]
    a, w = actions[..., 0], actions[..., 1]
    out = np.empty_like(states)
    out[..., 0] = x + v * np.cos(th) * dt
    out[..., 1] = y + v * np.sin(th) * dt
    out[..., 2] = wrap_angle(th + w * dt)
    out[..., 3] = np.maximum(0.0, v + a * dt)
    return out


def kinematic_step(state: VehicleState, action, dt: float) -> VehicleState:
    return VehicleState.from_array(step_states(state.as_array(), np.asarray(action, dtype=np.float64), dt))


@dataclass(frozen=True)
class LaneGeometry:
    n_lanes: int = 5
    lane_width: float = 3.7

    def __post_init__(self):
        if self.n_lanes < 1:
            raise SimError(f"need at least one lane, got {self.n_lanes}")
        if not self.lane_width > 0:
            raise SimError("lane width must be positive")

    def center(self, lane) -> np.ndarray:
        return (np.asarray(lane, dtype=np.float64) + 0.5) * self.lane_width

    def lane_of(self, y) -> np.ndarray:
        idx = np.floor(np.asarray(y, dtype=np.float64) / self.lane_width)
        return np.clip(idx, 0, self.n_lanes - 1).astype(int)

    @property
    def road_width(self) -> float:
        return self.n_lanes * self.lane_width


@dataclass
class WorldState:
    states: np.ndarray  # (N, 4)
    lanes: LaneGeometry = field(default_factory=LaneGeometry)
    time: float = 0.0
    dt: float = 0.1
    prev_actions: np.ndarray | None = None  # (N, 2)
    agent_ids: np.ndarray | None = None

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        n = self.states.shape[0]
        if n < 1:
            raise SimError("world needs at least one agent")
        if not self.dt > 0:
            raise SimError("dt must be positive")
        if self.prev_actions is None:
            self.prev_actions = np.zeros((n, 2))
        if self.agent_ids is None:
            self.agent_ids = np.arange(n)

    @property
    def n_agents(self) -> int:
        return self.states.shape[0]


@dataclass(frozen=True)
class ObservationSpec:
    """Layout of the observation vector.

    Ego block (6): speed, heading, lateral road position, signed offset from
    the nearest lane centre, previous accel, previous yaw rate.
    Neighbour block (7 each, ``k_neighbors`` of them, nearest first): x and y
    in the ego frame, speed difference, heading difference, distance, lane
    index difference, presence flag.
    Lane context (4): lane index, lanes to the left, distance to the left and
    right road edges.
    """

    k_neighbors: int = 8
    ego_features: int = 6
    neighbor_features: int = 7
    lane_features: int = 4

    @property
    def total_dim(self) -> int:
        return self.ego_features + self.k_neighbors * self.neighbor_features + self.lane_features


def _observe_rows(
    states: np.ndarray, prev_actions: np.ndarray, ids: np.ndarray, lanes: LaneGeometry, spec: ObservationSpec, rows
) -> np.ndarray:
    n = states.shape[0]
    K = spec.k_neighbors
    out = np.zeros((len(rows), spec.total_dim))
    lane_idx = lanes.lane_of(states[:, 1])
    for r, i in enumerate(rows):
        x, y, th, v = states[i]
        li = lane_idx[i]
        obs = out[r]
        obs[0] = v
        obs[1] = th
        obs[2] = y
        obs[3] = y - lanes.center(li)
        obs[4:6] = prev_actions[i]
        others = np.array([j for j in range(n) if j != i], dtype=int)
        if others.size:
            dx = states[others, 0] - x
            dy = states[others, 1] - y
            dist = np.hypot(dx, dy)
            # nearest first, ties broken by lower agent id
            order = np.lexsort((ids[others], dist))[:K]
            c, s = math.cos(th), math.sin(th)
            base = spec.ego_features
            for slot, o in enumerate(order):
                j = others[o]
                blk = obs[base + slot * spec.neighbor_features : base + (slot + 1) * spec.neighbor_features]
                blk[0] = c * dx[o] + s * dy[o]
                blk[1] = -s * dx[o] + c * dy[o]
                blk[2] = states[j, 3] - v
                blk[3] = wrap_angle(states[j, 2] - th)
                blk[4] = dist[o]
                blk[5] = lane_idx[j] - li
                blk[6] = 1.0
        tail = spec.ego_features + K * spec.neighbor_features
        obs[tail] = li
        obs[tail + 1] = lanes.n_lanes - 1 - li
        obs[tail + 2] = lanes.road_width - y
        obs[tail + 3] = y
    return out


def observe(world: WorldState, agent_id: int, spec: ObservationSpec = ObservationSpec()) -> np.ndarray:
    """Observation vector of one agent (indexed by position in ``world.states``)."""
    if not (0 <= agent_id < world.n_agents):
        raise SimError(f"invalid agent {agent_id} (world has {world.n_agents})")
    return _observe_rows(world.states, world.prev_actions, world.agent_ids, world.lanes, spec, [agent_id])[0]


def observe_all(world: WorldState, spec: ObservationSpec = ObservationSpec()) -> np.ndarray:
    return _observe_rows(world.states, world.prev_actions, world.agent_ids, world.lanes, spec, range(world.n_agents))


# ---------------------------------------------------------------------------
# synthetic experts


@dataclass(frozen=True)
class ExpertConfig:
    n_agents: int = 22
    n_steps: int = 500
    dt: float = 0.1
    n_lanes: int = 5
    lane_width: float = 3.7
    lane_keep_fraction: float = 0.7
    lane_change_fraction: float = 0.3
    noise_scale: float = 1.0
    seed: int = 0
    speed_range: tuple[float, float] = (8.0, 15.0)
    spacing: float = 15.0
    k_speed: float = 0.3
    k_heading: float = 1.2
    k_lateral: float = 0.4
    max_accel: float = 3.0
    max_yaw_rate: float = 0.3
    accel_noise: float = 0.3
    yaw_noise: float = 0.01
    change_duration: float = 4.0
    target_speed_rate: float = 0.125
    noise_tau: float = 1.0
    noise_smoothing_tau: float = 0.3

    def validate(self) -> None:
        if self.n_lanes < 1:
            raise SimError("infeasible config: need at least one lane")
        if self.n_agents < 1:
            raise SimError("need at least one agent")
        if self.n_steps < 2:
            raise SimError("need at least two steps")
        if not self.dt > 0:
            raise SimError("dt must be positive")
        if self.noise_scale < 0:
            raise SimError("noise scale must be non-negative")
        if self.lane_keep_fraction < 0 or self.lane_change_fraction < 0:
            raise SimError("behaviour fractions must be non-negative")
        if self.lane_keep_fraction + self.lane_change_fraction <= 0:
            raise SimError("behaviour fractions sum to zero")


def _smoothstep(s: np.ndarray) -> np.ndarray:
    s = np.clip(s, 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * s)


def generate_expert(config: ExpertConfig = ExpertConfig(), spec: ObservationSpec = ObservationSpec()) -> list[Trajectory]:
    """Synthetic demonstrations from proportional lane/speed controllers.

    Every agent starts on a lane centre with zero heading and tracks a cruise
    speed that starts at its initial speed and, when noise is enabled, is
    redrawn at random moments (rate ``target_speed_rate`` per second).
    Lane-change agents additionally shift their lateral target to an
    adjacent lane with a smooth cosine profile starting at a random step.
    Actions carry temporally correlated Gaussian noise (a low-pass filtered
    Ornstein-Uhlenbeck process, clipped at 3 sigma) scaled by ``noise_scale``.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    lanes = LaneGeometry(config.n_lanes, config.lane_width)
    N, T, dt = config.n_agents, config.n_steps, config.dt

    lane0 = rng.integers(0, config.n_lanes, size=N)
    x0 = np.arange(N) * config.spacing + rng.uniform(0.0, 0.3 * config.spacing, size=N)
    v0 = rng.uniform(*config.speed_range, size=N)
    v_target = v0.copy()
    p_change = config.lane_change_fraction / (config.lane_keep_fraction + config.lane_change_fraction)
    changes = rng.random(N) < p_change
    change_step = rng.integers(int(0.1 * T), max(int(0.1 * T) + 1, int(0.7 * T)), size=N)
    direction = np.where(rng.random(N) < 0.5, -1, 1)
    target_lane = np.clip(lane0 + direction, 0, config.n_lanes - 1)
    target_lane = np.where(target_lane == lane0, lane0 - direction, target_lane)
    target_lane = np.clip(target_lane, 0, config.n_lanes - 1)
    change_steps = max(1, int(round(config.change_duration / dt)))

    states = np.zeros((T, N, 4))
    actions = np.zeros((T, N, 2))
    obs = np.zeros((T, N, spec.total_dim))
    states[0, :, 0] = x0
    states[0, :, 1] = lanes.center(lane0)
    states[0, :, 3] = v0
    sigma = np.array([config.accel_noise, config.yaw_noise]) * config.noise_scale
    ids = np.arange(N)
    prev = np.zeros((N, 2))
    # noise = low-pass filtered Ornstein-Uhlenbeck process, unit stationary std
    rho = math.exp(-dt / config.noise_tau)
    a = math.exp(-dt / config.noise_smoothing_tau)
    gain = math.sqrt((1 + a) * (1 - a * rho) / ((1 - a) * (1 + a * rho)))
    ou = rng.standard_normal((N, 2))
    smooth = ou / gain
    for t in range(T):
        s = states[t]
        if config.noise_scale > 0:
            # occasional new cruise speed; the only source of sustained accel
            resample = rng.random(N) < config.target_speed_rate * dt
            v_target = np.where(resample, rng.uniform(*config.speed_range, size=N), v_target)
        obs[t] = _observe_rows(s, prev, ids, lanes, spec, range(N))
        progress = _smoothstep((t - change_step) / change_steps)
        y_ref = lanes.center(lane0) + np.where(changes, progress, 0.0) * (
            lanes.center(target_lane) - lanes.center(lane0)
        )
        accel = config.k_speed * (v_target - s[:, 3])
        yaw = -config.k_heading * s[:, 2] - config.k_lateral * (s[:, 1] - y_ref) / np.maximum(s[:, 3], 1.0)
        if config.noise_scale > 0:
            noise = np.clip(smooth * gain, -3.0, 3.0) * sigma
            accel = accel + noise[:, 0]
            yaw = yaw + noise[:, 1]
            ou = rho * ou + math.sqrt(1 - rho * rho) * rng.standard_normal((N, 2))
            smooth = a * smooth + (1 - a) * ou
        act = np.stack(
            [np.clip(accel, -config.max_accel, config.max_accel), np.clip(yaw, -config.max_yaw_rate, config.max_yaw_rate)],
            axis=1,
        )
        actions[t] = act
        prev = act
        if t + 1 < T:
            states[t + 1] = step_states(s, act, dt)

    times = np.arange(T) * dt
    return [Trajectory(times.copy(), actions[:, i].copy(), obs[:, i].copy(), states[:, i].copy(), agent_id=i) for i in range(N)]


# ---------------------------------------------------------------------------
# closed-loop rollout


class Policy(Protocol):
    def __call__(
        self, histories: Sequence[History], observations: np.ndarray, mode: str, rng: np.random.Generator
    ) -> np.ndarray:
        """Actions ``(N, 2)`` for every agent.

        ``histories[i]`` holds agent ``i``'s completed ``(observation, action)``
        pairs; ``observations[i]`` is its current, not yet acted-on observation.
        """


class ZeroActionPolicy:
    """Constant-velocity baseline: zero accel and zero yaw rate."""

    def __call__(self, histories, observations, mode, rng):
        return np.zeros((len(observations), 2))


class ReplayPolicy:
    """Replays recorded actions ``(steps, N, 2)`` step by step."""

    def __init__(self, actions: np.ndarray):
        self.actions = np.asarray(actions, dtype=np.float64)
        self.t = 0

    def __call__(self, histories, observations, mode, rng):
        a = self.actions[self.t]
        self.t += 1
        return a


@dataclass
class _AgentLog:
    obs: list = field(default_factory=list)
    act: list = field(default_factory=list)


def rollout(
    world: WorldState,
    policy: Callable,
    steps: int,
    mode: str = "deterministic",
    seed: int = 0,
    spec: ObservationSpec = ObservationSpec(),
    histories: Sequence[History] | None = None,
    max_history: int | None = None,
    timings: list | None = None,
) -> list[Trajectory]:
    """Drive every agent with ``policy`` for ``steps`` synchronous steps.

    Each step computes all observations, then all actions, then advances all
    states, so the result does not depend on agent ordering. ``histories``
    seeds each agent's record of past pairs; ``max_history`` caps the pairs
    handed to the policy. Returned trajectories contain only the simulated
    steps. ``timings`` (if given) receives the wall time of each step.
    """
    if steps < 1:
        raise SimError("steps must be >= 1")
    if mode not in ("deterministic", "sampled"):
        raise SimError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    N = world.n_agents
    logs = [_AgentLog() for _ in range(N)]
    if histories is not None:
        if len(histories) != N:
            raise SimError(f"{len(histories)} histories for {N} agents")
        for log, h in zip(logs, histories):
            na = h.actions.shape[0] if h.actions.ndim == 2 else 0
            log.obs = [row for row in h.observations[:na]]
            log.act = [row for row in h.actions[:na]]
    states = world.states.copy()
    prev = world.prev_actions.copy()
    rec_states = np.zeros((steps, N, 4))
    rec_actions = np.zeros((steps, N, 2))
    rec_obs = np.zeros((steps, N, spec.total_dim))
    for k in range(steps):
        t0 = _time.perf_counter()
        obs = _observe_rows(states, prev, world.agent_ids, world.lanes, spec, range(N))
        hist = []
        for log in logs:
            o = log.obs if max_history is None else log.obs[-max_history:]
            a = log.act if max_history is None else log.act[-max_history:]
            if o:
                hist.append(History(np.array(o), np.array(a)))
            else:
                hist.append(None)
        try:
            act = np.asarray(policy(hist, obs, mode, rng), dtype=np.float64).reshape(N, 2)
        except Exception as exc:  # noqa: BLE001 - re-raised with context
            raise SimError(f"policy failed at step {k}: {exc}") from exc
        bad = np.where(~np.all(np.isfinite(act), axis=1))[0]
        if bad.size:
            raise SimError(f"policy returned non-finite action for agent {int(world.agent_ids[bad[0]])} at step {k}")
        rec_states[k], rec_actions[k], rec_obs[k] = states, act, obs
        for i, log in enumerate(logs):
            log.obs.append(obs[i])
            log.act.append(act[i])
        states = step_states(states, act, world.dt)
        prev = act
        if timings is not None:
            timings.append(_time.perf_counter() - t0)
    world.states = states
    world.prev_actions = prev
    world.time += steps * world.dt
    times = world.time - steps * world.dt + np.arange(steps) * world.dt
    return [
        Trajectory(times.copy(), rec_actions[:, i].copy(), rec_obs[:, i].copy(), rec_states[:, i].copy(), int(world.agent_ids[i]))
        for i in range(N)
    ]
