"""Differentiable ODE integration for ``dz/dt = f(z, t)``.

Two explicit schemes are provided:

* ``"rk4"``: classical fixed-step Runge-Kutta. Every step is built from
  :class:`~clode.numerics.Tensor` ops, so gradients flow back through the
  solver to ``z0`` and to any parameters captured by the dynamics.
* ``"dopri5"``: Dormand-Prince 5(4) with adaptive step size, meant for
  accuracy checks at inference time.

Both accept increasing or decreasing output times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .numerics import Tensor, no_grad

__all__ = ["SolverError", "SolveRequest", "solve", "solve_backward_in_time", "solve_numpy", "rk4_step"]

DynamicsFn = Callable[[Tensor, float], Tensor]


class SolverError(ValueError):
    pass


@dataclass
class SolveRequest:
    dynamics: DynamicsFn
    z0: Tensor
    times: Sequence[float]
    method: str = "rk4"
    dt: float = 0.025
    rtol: float = 1e-6
    atol: float = 1e-8

    def validate(self) -> np.ndarray:
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        if times.size < 1:
            raise SolverError("times must contain at least one entry")
        if not np.all(np.isfinite(times)):
            raise SolverError("times must be finite")
        if times.size > 1:
            d = np.diff(times)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise SolverError(f"times must be strictly monotone, got {times.tolist()}")
        if self.method == "rk4":
            if not self.dt > 0:
                raise SolverError(f"rk4 step dt must be positive, got {self.dt}")
        elif self.method == "dopri5":
            if not (self.rtol > 0 and self.atol > 0):
                raise SolverError("dopri5 needs rtol > 0 and atol > 0")
        else:
            raise SolverError(f"unknown method {self.method!r}")
        return times


def rk4_step(f: DynamicsFn, z: Tensor, t: float, h: float) -> Tensor:
    k1 = f(z, t)
    k2 = f(z + k1 * (0.5 * h), t + 0.5 * h)
    k3 = f(z + k2 * (0.5 * h), t + 0.5 * h)
    k4 = f(z + k3 * h, t + h)
    return z + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)


def _substeps(span: float, dt: float) -> list[float]:
    """Signed step sizes covering ``span``; the final one is shortened to land exactly."""
    n = max(1, math.ceil(abs(span) / dt - 1e-9))
    sign = 1.0 if span > 0 else -1.0
    steps = [sign * dt] * (n - 1)
    steps.append(span - sign * dt * (n - 1))
    return steps


def _rk4_interval(f: DynamicsFn, z: Tensor, t0: float, t1: float, dt: float) -> Tensor:
    t = t0
    for h in _substeps(t1 - t0, dt):
        z = rk4_step(f, z, t, h)
        t += h
    return z


# Dormand-Prince 5(4) tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


def _dopri_trial(f: DynamicsFn, z: Tensor, t: float, h: float) -> tuple[Tensor, np.ndarray]:
    ks: list[Tensor] = []
    for i in range(7):
        zi = z
        for a, k in zip(_A[i], ks):
            if a != 0.0:
                zi = zi + k * (a * h)
        ks.append(f(zi, t + _C[i] * h))
    z5 = z
    for b, k in zip(_B5, ks):
        if b != 0.0:
            z5 = z5 + k * (b * h)
    err = h * sum((b5 - b4) * k.data for b5, b4, k in zip(_B5, _B4, ks))
    return z5, err


def _dopri_interval(
    f: DynamicsFn, z: Tensor, t0: float, t1: float, rtol: float, atol: float, h0: float | None
) -> tuple[Tensor, float]:
    span = t1 - t0
    sign = 1.0 if span > 0 else -1.0
    h_min = 1e-12 * abs(span)
    h = abs(h0) if h0 else min(abs(span), 0.01 * max(1.0, abs(span)))
    t = t0
    while sign * (t1 - t) > 0:
        h = min(h, abs(t1 - t))
        if h < h_min:
            raise SolverError(f"dopri5 step size underflow at t={t:.6g} (stiff problem?)")
        z_new, err = _dopri_trial(f, z, t, sign * h)
        scale = atol + rtol * np.maximum(np.abs(z.data), np.abs(z_new.data))
        ratio = float(np.sqrt(np.mean((err / scale) ** 2))) if err.size else 0.0
        if ratio <= 1.0:
            t = t1 if abs(t1 - (t + sign * h)) <= 1e-14 * max(1.0, abs(t1)) else t + sign * h
            z = z_new
        factor = 5.0 if ratio == 0.0 else min(5.0, max(0.2, 0.9 * ratio ** -0.2))
        h *= factor
    return z, h


def solve(request: SolveRequest) -> list[Tensor]:
    """Integrate from ``times[0]`` and return the state at every requested time.

    ``output[0]`` is ``z0`` itself. With ``method="rk4"`` each interval between
    consecutive requested times is covered by steps of ``dt`` with the last
    one shortened, so intermediate outputs never drift off the grid.
    """
    times = request.validate()
    f = request.dynamics
    out = [request.z0]
    z = request.z0
    h_prev = None
    for t0, t1 in zip(times[:-1], times[1:]):
        if request.method == "rk4":
            z = _rk4_interval(f, z, float(t0), float(t1), request.dt)
        else:
            z, h_prev = _dopri_interval(f, z, float(t0), float(t1), request.rtol, request.atol, h_prev)
        out.append(z)
    return out


def solve_backward_in_time(request: SolveRequest) -> list[Tensor]:
    """Same contract as :func:`solve`, restricted to strictly decreasing times."""
    times = np.asarray(request.times, dtype=np.float64).reshape(-1)
    if times.size > 1 and not np.all(np.diff(times) < 0):
        raise SolverError(f"solve_backward_in_time needs strictly decreasing times, got {times.tolist()}")
    return solve(request)


def solve_numpy(f: Callable[[np.ndarray, float], np.ndarray], z0, times, **kwargs) -> np.ndarray:
    """Convenience wrapper for plain-array dynamics; returns an array ``(len(times), *z0.shape)``."""
    with no_grad():
        req = SolveRequest(lambda z, t: Tensor(f(z.data, t)), Tensor(z0), times, **kwargs)
        return np.stack([s.data for s in solve(req)])

