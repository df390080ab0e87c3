"""Trajectory and history containers shared by the simulator, model and IO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TrajectoryError", "Trajectory", "History"]


class TrajectoryError(ValueError):
    pass


@dataclass
class Trajectory:
    """One agent's time-indexed ``(action, observation)`` sequence.

    ``states[t]`` is the vehicle state ``(x, y, theta, v)`` at which
    ``actions[t]`` was applied, and ``observations[t]`` is what the agent saw
    in that state. ``states`` is optional for purely model-side use.
    """

    times: np.ndarray
    actions: np.ndarray
    observations: np.ndarray
    states: np.ndarray | None = None
    agent_id: int = 0

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        if self.states is not None:
            self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.validate()

    def validate(self) -> None:
        T = self.times.size
        if self.actions.shape[0] != T or self.observations.shape[0] != T:
            raise TrajectoryError(
                f"agent {self.agent_id}: {T} times but {self.actions.shape[0]} actions "
                f"and {self.observations.shape[0]} observations"
            )
        if self.states is not None and self.states.shape != (T, 4):
            raise TrajectoryError(f"agent {self.agent_id}: states shape {self.states.shape}, expected ({T}, 4)")
        for name in ("times", "actions", "observations", "states"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise TrajectoryError(f"agent {self.agent_id}: non-finite {name}")
        if T > 1:
            d = np.diff(self.times)
            if np.any(d <= 0):
                raise TrajectoryError(f"agent {self.agent_id}: times not strictly increasing")
            if not np.allclose(d, d[0], rtol=1e-6, atol=1e-9):
                raise TrajectoryError(f"agent {self.agent_id}: non-uniform time spacing")

    def __len__(self) -> int:
        return self.times.size

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if len(self) > 1 else float("nan")

    def slice(self, start: int, stop: int) -> "Trajectory":
        """Copy of steps ``start:stop``; never aliases this trajectory's storage."""
        return Trajectory(
            self.times[start:stop].copy(),
            self.actions[start:stop].copy(),
            self.observations[start:stop].copy(),
            None if self.states is None else self.states[start:stop].copy(),
            self.agent_id,
        )


@dataclass
class History:
    """Prefix ``h_t`` of a trajectory used to condition a prediction.

    ``actions`` may be one entry shorter than ``observations``; the missing
    final action is treated as a zero vector when embedding.
    """

    observations: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, dtype=np.float64))
        self.actions = np.asarray(self.actions, dtype=np.float64)
        n = self.observations.shape[0]
        if n < 1:
            raise TrajectoryError("history needs at least one step")
        if self.actions.ndim == 1 and self.actions.size == 0:
            self.actions = self.actions.reshape(0, 0)
        if self.actions.shape[0] not in (n, n - 1):
            raise TrajectoryError(f"history has {n} observations but {self.actions.shape[0]} actions")

    def __len__(self) -> int:
        return self.observations.shape[0]

    def padded_actions(self, action_dim: int) -> np.ndarray:
        n = len(self)
        if self.actions.shape[0] == n:
            return self.actions
        out = np.zeros((n, action_dim))
        if n > 1:
            out[:-1] = self.actions
        return out

    @classmethod
    def from_trajectory(cls, traj: Trajectory, length: int | None = None) -> "History":
        n = len(traj) if length is None else length
        return cls(traj.observations[:n].copy(), traj.actions[:n].copy())
