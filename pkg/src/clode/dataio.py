"""Trajectory CSV files, training windows, batching and binary checkpoints.

CSV layout (UTF-8, ``\\n`` line endings, no quoting)::

    time,agent_id,x,y,theta,v,accel,yaw_rate

Rows are grouped by agent with strictly increasing time. Floats are written
with 17 significant digits so a save/load round trip is lossless.
Observations are not stored; they are recomputed on load.

Checkpoint layout (all integers and floats little-endian)::

    b"CLODECKP" | u32 version | u32 meta_len | meta (UTF-8 JSON: dims, step)
    repeated blocks:
        u8 kind (b"P" param, b"B" buffer, b"O" optimizer) | u16 name_len | name
        | u32 ndim | u64 * ndim shape | f64 * prod(shape) values
    b"END!"
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import ModelDims, ModelParams, init_params
from .simenv import LaneGeometry, ObservationSpec, _observe_rows
from .trajectory import Trajectory

__all__ = [
    "DataError",
    "CSV_HEADER",
    "CHECKPOINT_VERSION",
    "TrainingSample",
    "Checkpoint",
    "save_trajectories",
    "load_trajectories",
    "window_history",
    "batch",
    "stack_samples",
    "save_checkpoint",
    "load_checkpoint",
    "atomic_write_bytes",
    "atomic_write_text",
]

CSV_HEADER = "time,agent_id,x,y,theta,v,accel,yaw_rate"
CHECKPOINT_VERSION = 1
_MAGIC = b"CLODECKP"
_END = b"END!"


class DataError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


def trajectories_to_csv(trajectories: list[Trajectory]) -> str:
    lines = [CSV_HEADER]
    for tr in trajectories:
        if tr.states is None:
            raise DataError(f"agent {tr.agent_id}: trajectory has no states to save")
        for t, s, a in zip(tr.times, tr.states, tr.actions):
            lines.append(
                ",".join([_fmt(t), str(int(tr.agent_id)), _fmt(s[0]), _fmt(s[1]), _fmt(s[2]), _fmt(s[3]), _fmt(a[0]), _fmt(a[1])])
            )
    return "\n".join(lines) + "\n"


def save_trajectories(trajectories: list[Trajectory], path) -> None:
    atomic_write_text(path, trajectories_to_csv(trajectories))


def load_trajectories(
    path, lanes: LaneGeometry = LaneGeometry(), spec: ObservationSpec = ObservationSpec(), dt_tol: float = 1e-6
) -> list[Trajectory]:
    """Read a trajectory CSV and rebuild observations from the stored states.

    At each time stamp the world consists of the agents that have a row at
    that time. ``prev accel / yaw rate`` features come from the agent's
    previous row (zero on its first row).
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.split("\n")
    if not lines or lines[0].strip() != CSV_HEADER:
        raise DataError(f"{path}:1: expected header {CSV_HEADER!r}")
    rows: dict[int, list[tuple[int, np.ndarray]]] = {}
    order: list[int] = []
    last_agent = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
        try:
            agent = int(parts[1])
            vals = np.array([float(p) for i, p in enumerate(parts) if i != 1])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed number") from None
        if not np.all(np.isfinite(vals)):
            raise DataError(f"{path}:{lineno}: non-finite value")
        if agent != last_agent:
            if agent in rows:
                raise DataError(f"{path}:{lineno}: rows of agent {agent} are not contiguous")
            rows[agent] = []
            order.append(agent)
            last_agent = agent
        prev = rows[agent]
        if prev and vals[0] <= prev[-1][1][0]:
            raise DataError(f"{path}:{lineno}: time {vals[0]} not increasing for agent {agent}")
        rows[agent].append((lineno, vals))
    if not order:
        return []

    dts = []
    for agent in order:
        ts = np.array([v[0] for _, v in rows[agent]])
        if ts.size > 1:
            d = np.diff(ts)
            dts.append(d)
    if dts:
        all_d = np.concatenate(dts)
        dt = float(all_d[0])
        bad = np.where(np.abs(all_d - dt) > dt_tol * max(1.0, abs(dt)))[0]
        if bad.size:
            raise DataError(f"{path}: non-uniform dt (expected {dt}, found {all_d[bad[0]]})")
    else:
        dt = 1.0

    t_min = min(rows[a][0][1][0] for a in order)
    idx_of = {}
    for agent in order:
        ts = np.array([v[0] for _, v in rows[agent]])
        idx_of[agent] = np.rint((ts - t_min) / dt).astype(int)
    n_steps = max(int(ix[-1]) for ix in idx_of.values()) + 1

    agent_pos = {a: i for i, a in enumerate(order)}
    N = len(order)
    present = np.zeros((n_steps, N), dtype=bool)
    states = np.zeros((n_steps, N, 4))
    prev_act = np.zeros((n_steps, N, 2))
    for agent in order:
        i = agent_pos[agent]
        vals = np.array([v for _, v in rows[agent]])
        ix = idx_of[agent]
        present[ix, i] = True
        states[ix, i] = vals[:, 1:5]
        prev_act[ix[1:], i] = vals[:-1, 5:7]

    ids = np.array(order)
    obs_by_agent = {a: np.zeros((len(rows[a]), spec.total_dim)) for a in order}
    cursor = {a: 0 for a in order}
    for t in range(n_steps):
        live = np.where(present[t])[0]
        if live.size == 0:
            continue
        obs = _observe_rows(states[t, live], prev_act[t, live], ids[live], lanes, spec, range(live.size))
        for r, i in enumerate(live):
            a = order[i]
            obs_by_agent[a][cursor[a]] = obs[r]
            cursor[a] += 1

    out = []
    for agent in order:
        vals = np.array([v for _, v in rows[agent]])
        out.append(Trajectory(vals[:, 0], vals[:, 5:7], obs_by_agent[agent], vals[:, 1:5], agent_id=agent))
    return out


# ---------------------------------------------------------------------------
# windows and batches


@dataclass
class TrainingSample:
    """Window of ``L`` consecutive steps; the window is also its own reconstruction target."""

    observations: np.ndarray
    actions: np.ndarray
    agent_id: int = 0
    start: int = 0

    def __len__(self) -> int:
        return self.actions.shape[0]


def window_history(trajectory: Trajectory, L: int, stride: int = 1) -> list[TrainingSample]:
    if L < 2:
        raise DataError(f"window length must be >= 2, got {L}")
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    T = len(trajectory)
    if T < L:
        return []
    out = []
    for s in range(0, T - L + 1, stride):
        out.append(
            TrainingSample(
                trajectory.observations[s : s + L].copy(), trajectory.actions[s : s + L].copy(), trajectory.agent_id, s
            )
        )
    return out


def batch(samples: list, B: int, seed: int = 0) -> list[list]:
    """Shuffle with a seeded generator and cut into ``ceil(n / B)`` batches."""
    if B < 1:
        raise DataError(f"batch size must be >= 1, got {B}")
    perm = np.random.default_rng(seed).permutation(len(samples))
    return [[samples[i] for i in perm[k : k + B]] for k in range(0, len(samples), B)]


def stack_samples(samples: list[TrainingSample]) -> tuple[np.ndarray, np.ndarray]:
    lengths = {len(s) for s in samples}
    if len(lengths) != 1:
        raise DataError(f"samples in one batch have different lengths {sorted(lengths)}")
    return np.stack([s.observations for s in samples]), np.stack([s.actions for s in samples])


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: ModelParams
    step: int = 0
    optimizer: dict | None = None  # name -> array; see trainer.OptimizerState
    meta: dict | None = None


def _write_block(buf: io.BytesIO, kind: bytes, name: str, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    nb = name.encode("utf-8")
    buf.write(kind)
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def checkpoint_bytes(params: ModelParams, optimizer: dict | None = None, step: int = 0, extra: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    meta = {"dims": params.dims.to_dict(), "step": int(step)}
    if extra:
        meta["extra"] = extra
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    for name, t in params.named_parameters():
        _write_block(buf, b"P", name, t.data)
    for name, arr in params.buffers():
        _write_block(buf, b"B", name, arr)
    for name, arr in sorted((optimizer or {}).items()):
        _write_block(buf, b"O", name, np.asarray(arr))
    buf.write(_END)
    return buf.getvalue()


def save_checkpoint(params: ModelParams, optimizer: dict | None, step: int, path, extra: dict | None = None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(params, optimizer, step, extra))


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if len(data) < len(_MAGIC) + 4 or data[: len(_MAGIC)] != _MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad or missing version header)")
    r.take(len(_MAGIC))
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (mlen,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(mlen).decode("utf-8"))
        dims = ModelDims.from_dict(meta["dims"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: bad checkpoint metadata: {exc}") from None
    params = init_params(dims, seed=0)
    pnames = dict(params.named_parameters())
    bnames = dict(params.buffers())
    seen_p: set[str] = set()
    optimizer: dict[str, np.ndarray] = {}
    while True:
        kind = r.take(1)
        if kind == b"E":
            if r.take(3) != b"ND!":
                raise DataError(f"{path}: corrupt end marker")
            break
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if kind == b"P":
            if name not in pnames:
                raise DataError(f"{path}: unknown parameter block {name!r}")
            if pnames[name].shape != arr.shape:
                raise DataError(f"{path}: block {name!r} has shape {arr.shape}, expected {pnames[name].shape}")
            pnames[name].data = arr.copy()
            seen_p.add(name)
        elif kind == b"B":
            if name not in bnames:
                raise DataError(f"{path}: unknown buffer block {name!r}")
            setattr(params, name, arr.copy())
        elif kind == b"O":
            optimizer[name] = arr.copy()
        else:
            raise DataError(f"{path}: unknown block kind {kind!r}")
    missing = set(pnames) - seen_p
    if missing:
        raise DataError(f"{path}: missing parameter blocks {sorted(missing)}")
    return Checkpoint(params, int(meta.get("step", 0)), optimizer or None, meta.get("extra"))
