"""Positional RMSE metrics, closed-loop evaluation and the history-length ablation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import ModelParams, predict_batch
from .simenv import LaneGeometry, ObservationSpec, ReplayPolicy, WorldState, rollout
from .trajectory import History, Trajectory

__all__ = [
    "EvalError",
    "MetricsRecord",
    "ClodePolicy",
    "positional_errors",
    "rmse",
    "aggregate",
    "evaluate_rollout",
    "ablation",
    "metrics_csv",
    "ablation_csv",
    "ablation_summary_csv",
    "format_report_row",
    "METRICS_HEADER",
]

METRICS_HEADER = "step,time_s,rmse_long,rmse_lat,rmse_total,std_pos,m"


class EvalError(ValueError):
    pass


def _xy(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        if traj.states is None:
            raise EvalError("trajectory has no states")
        return traj.states[:, :2]
    arr = np.asarray(traj, dtype=np.float64)
    return arr[:, :2]


def _heading0(traj) -> float:
    if isinstance(traj, Trajectory):
        return float(traj.states[0, 2])
    arr = np.asarray(traj, dtype=np.float64)
    if arr.shape[1] < 3:
        raise EvalError("ground truth needs a heading column to fix the base frame")
    return float(arr[0, 2])


def positional_errors(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Longitudinal, lateral and total error per step.

    Both paths are expressed in the frame anchored at the ground truth's
    first pose (x-axis along its initial heading). ``pred`` and ``gt`` are
    :class:`Trajectory` objects or ``(T, >=2)`` arrays of ``x, y[, theta]``.
    """
    p, g = _xy(pred), _xy(gt)
    if p.shape != g.shape:
        raise EvalError(f"length mismatch: prediction {p.shape[0]} steps, ground truth {g.shape[0]}")
    th = _heading0(gt)
    c, s = np.cos(th), np.sin(th)
    d = p - g
    x = c * d[:, 0] + s * d[:, 1]
    y = -s * d[:, 0] + c * d[:, 1]
    return x, y, np.sqrt(x * x + y * y)


def rmse(values, predicted=None) -> float:
    """``sqrt(mean((v - v_hat)^2))``; with one argument the values are residuals."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise EvalError("rmse of zero samples")
    r = v if predicted is None else v - np.asarray(predicted, dtype=np.float64).reshape(-1)
    return float(np.sqrt(np.mean(r * r)))


@dataclass
class MetricsRecord:
    dt: float
    rmse_long: np.ndarray
    rmse_lat: np.ndarray
    rmse_total: np.ndarray
    std_pos: np.ndarray
    m: int
    skipped: int = 0
    per_agent: dict[int, np.ndarray] = field(default_factory=dict)
    step_wall_time: np.ndarray | None = None

    @property
    def horizon(self) -> int:
        return int(self.rmse_total.size)

    def row(self, step: int) -> dict:
        """Metrics after ``step`` simulated steps (1-based)."""
        if not 1 <= step <= self.horizon:
            raise EvalError(f"step {step} outside horizon {self.horizon}")
        i = step - 1
        return {
            "step": step,
            "time_s": step * self.dt,
            "rmse_long": float(self.rmse_long[i]),
            "rmse_lat": float(self.rmse_lat[i]),
            "rmse_total": float(self.rmse_total[i]),
            "std_pos": float(self.std_pos[i]),
            "m": self.m,
        }


def aggregate(errors: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]], dt: float, agent_ids=None) -> MetricsRecord:
    """Pool per-sample error series (each of length ``H``) into per-step RMSEs."""
    if not errors:
        raise EvalError("no samples to aggregate")
    X = np.stack([e[0] for e in errors])
    Y = np.stack([e[1] for e in errors])
    P = np.stack([e[2] for e in errors])
    per_agent = {}
    if agent_ids is not None:
        ids = np.asarray(agent_ids)
        for a in np.unique(ids):
            sel = P[ids == a]
            per_agent[int(a)] = np.sqrt(np.mean(sel * sel, axis=0))
    return MetricsRecord(
        dt=dt,
        rmse_long=np.sqrt(np.mean(X * X, axis=0)),
        rmse_lat=np.sqrt(np.mean(Y * Y, axis=0)),
        rmse_total=np.sqrt(np.mean(P * P, axis=0)),
        std_pos=P.std(axis=0),
        m=len(errors),
        per_agent=per_agent,
    )


class ClodePolicy:
    """Closed-loop policy backed by a trained model.

    Each agent's action is the first predicted step after its last
    ``history_len`` completed ``(observation, action)`` pairs. An agent with
    no completed pair is conditioned on its current observation with a zero
    action. With ``open_loop=True`` the first call predicts the whole
    ``horizon`` and later calls replay it.
    """

    def __init__(self, params: ModelParams, history_len: int, open_loop: bool = False, horizon: int = 1):
        self.params = params
        self.history_len = history_len
        self.open_loop = open_loop
        self.horizon = horizon
        self._plan: np.ndarray | None = None
        self._t = 0

    def _sample(self, mu, sigma, mode, rng):
        if mode == "sampled":
            return mu + sigma * rng.standard_normal(mu.shape)
        return mu

    def __call__(self, histories, observations, mode, rng):
        if self.open_loop and self._plan is not None:
            a = self._plan[:, self._t]
            self._t += 1
            return a
        N = len(observations)
        k = self.horizon if self.open_loop else 1
        A = self.params.dims.action_dim
        out = np.zeros((N, k, A))
        groups: dict[int, list[int]] = {}
        for i, h in enumerate(histories):
            n = 0 if h is None else min(len(h), self.history_len)
            groups.setdefault(n, []).append(i)
        latent = self.params.dims.latent_dim
        for n, idx in sorted(groups.items()):
            if n == 0:
                obs = np.asarray(observations)[idx][:, None, :]
                act = np.zeros((len(idx), 1, A))
            else:
                obs = np.stack([histories[i].observations[-n:] for i in idx])
                act = np.stack([histories[i].actions[-n:] for i in idx])
            noise = rng.standard_normal((len(idx), latent)) if mode == "sampled" else None
            mu, sigma = predict_batch(self.params, obs, act, k, noise)
            out[idx] = self._sample(mu, sigma, mode, rng)
        if self.open_loop:
            self._plan = out
            self._t = 1
        return out[:, 0]


def _window_starts(T: int, L: int, H: int, n_samples: int | None, stride: int | None) -> list[int]:
    last = T - (L + H + 1)
    if last < 0:
        return []
    starts = list(range(0, last + 1, stride or max(1, H)))
    if n_samples is not None and len(starts) > n_samples:
        pick = np.linspace(0, len(starts) - 1, n_samples).round().astype(int)
        starts = [starts[i] for i in pick]
    return starts


def _common_grid(dataset: Sequence[Trajectory]) -> tuple[float, float]:
    dts = [tr.dt for tr in dataset if len(tr) > 1]
    if not dts:
        raise EvalError("dataset has no trajectory with at least two steps")
    dt = dts[0]
    if any(abs(d - dt) > 1e-6 * max(1.0, dt) for d in dts):
        raise EvalError("trajectories use different dt")
    return dt, min(float(tr.times[0]) for tr in dataset)


def evaluate_rollout(
    policy_or_params,
    dataset: Sequence[Trajectory],
    horizon: int = 25,
    history_len: int = 5,
    n_samples: int | None = None,
    mode: str = "deterministic",
    seed: int = 0,
    stride: int | None = None,
    lanes: LaneGeometry = LaneGeometry(),
    spec: ObservationSpec = ObservationSpec(),
    open_loop: bool = False,
    replay_ground_truth: bool = False,
    record_wall_time: bool = False,
) -> MetricsRecord:
    """Closed-loop RMSE of a policy against held-out demonstrations.

    For each evaluation window start ``s`` every agent that covers steps
    ``s .. s + L + H`` is conditioned on its ground-truth pairs ``s .. s+L-1``
    and placed at its ground-truth state ``s + L``; all of them are then
    rolled out together for ``H`` steps. Errors after each step are measured
    against the ground truth in the frame of the agent's start pose. Agents
    whose trajectory is too short are counted in ``skipped``.

    ``policy_or_params`` is a :class:`ModelParams` (wrapped in
    :class:`ClodePolicy`) or a factory ``() -> policy``.
    ``replay_ground_truth`` swaps in a policy that replays recorded actions.
    """
    L, H = history_len, horizon
    if H < 1 or L < 1:
        raise EvalError("horizon and history length must be >= 1")
    dt, t0 = _common_grid(dataset)
    index = [np.rint((tr.times - t0) / dt).astype(int) for tr in dataset]
    n_steps = max(int(ix[-1]) for ix in index) + 1
    skipped = {i for i, tr in enumerate(dataset) if len(tr) < L + H + 1}

    errors, ids, walls = [], [], []
    for s in _window_starts(n_steps, L, H, n_samples, stride):
        members = [
            i for i, ix in enumerate(index)
            if i not in skipped and ix[0] <= s and ix[-1] >= s + L + H
        ]
        if not members:
            continue
        off = [s - int(index[i][0]) for i in members]
        trs = [dataset[i] for i in members]
        world = WorldState(
            np.stack([tr.states[o + L] for tr, o in zip(trs, off)]),
            lanes=lanes,
            time=float(trs[0].times[off[0] + L]),
            dt=dt,
            prev_actions=np.stack([tr.actions[o + L - 1] for tr, o in zip(trs, off)]),
            agent_ids=np.array([tr.agent_id for tr in trs]),
        )
        hists = [History(tr.observations[o : o + L], tr.actions[o : o + L]) for tr, o in zip(trs, off)]
        if replay_ground_truth:
            policy = ReplayPolicy(np.stack([tr.actions[o + L : o + L + H] for tr, o in zip(trs, off)], axis=1))
        elif isinstance(policy_or_params, ModelParams):
            policy = ClodePolicy(policy_or_params, L, open_loop=open_loop, horizon=H)
        else:
            policy = policy_or_params()
        timings: list[float] = []
        out = rollout(world, policy, H, mode=mode, seed=seed + s, spec=spec, histories=hists, max_history=L, timings=timings)
        walls.append(timings)
        final = world.states
        for j, (tr, o) in enumerate(zip(trs, off)):
            pred = np.concatenate([out[j].states[1:], final[j : j + 1]])
            gt = tr.states[o + L : o + L + H + 1]
            x, y, p = positional_errors(np.concatenate([gt[:1], pred]), gt)
            errors.append((x[1:], y[1:], p[1:]))
            ids.append(tr.agent_id)
    if not errors:
        raise EvalError(f"no trajectory long enough for history {L} + horizon {H}")
    rec = aggregate(errors, dt, ids)
    rec.skipped = len(skipped)
    if record_wall_time:
        rec.step_wall_time = np.mean(np.array(walls), axis=0)
    return rec


def ablation(
    train_fn: Callable[[int], ModelParams],
    dataset: Sequence[Trajectory],
    history_lengths: Sequence[int] = (5, 10, 20, 50, 100),
    horizon: int = 25,
    seed: int = 0,
    **eval_kwargs,
) -> dict[int, MetricsRecord]:
    """Train one model per history length with ``train_fn(L)`` and evaluate each."""
    if not history_lengths:
        raise EvalError("history length list is empty")
    table = {}
    for L in history_lengths:
        params = train_fn(L)
        table[int(L)] = evaluate_rollout(params, dataset, horizon=horizon, history_len=L, seed=seed, **eval_kwargs)
    return table


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def metrics_csv(rec: MetricsRecord) -> str:
    lines = [METRICS_HEADER]
    for k in range(1, rec.horizon + 1):
        r = rec.row(k)
        lines.append(
            f"{k},{_fmt(r['time_s'])},{_fmt(r['rmse_long'])},{_fmt(r['rmse_lat'])},"
            f"{_fmt(r['rmse_total'])},{_fmt(r['std_pos'])},{r['m']}"
        )
    return "\n".join(lines) + "\n"


def per_agent_csv(rec: MetricsRecord) -> str:
    lines = ["agent_id,step,rmse_total"]
    for a, series in sorted(rec.per_agent.items()):
        lines += [f"{a},{k + 1},{_fmt(v)}" for k, v in enumerate(series)]
    return "\n".join(lines) + "\n"


def ablation_csv(table: dict[int, MetricsRecord]) -> str:
    lines = ["history_len," + METRICS_HEADER]
    for L, rec in table.items():
        lines += [f"{L},{row}" for row in metrics_csv(rec).splitlines()[1:]]
    return "\n".join(lines) + "\n"


def ablation_summary_csv(table: dict[int, MetricsRecord], step: int) -> str:
    lines = ["history_len," + METRICS_HEADER]
    for L, rec in table.items():
        lines.append(f"{L}," + metrics_csv(rec).splitlines()[min(step, rec.horizon)])
    return "\n".join(lines) + "\n"


def format_report_row(label: str, rec: MetricsRecord, step: int = 25) -> str:
    """Table-style line, e.g. ``cLODE with 5 obs, longitudinal 1.44, lateral 1.64, total 2.18``."""
    r = rec.row(min(step, rec.horizon))
    return f"{label}, longitudinal {r['rmse_long']:.2f}, lateral {r['rmse_lat']:.2f}, total {r['rmse_total']:.2f}"
