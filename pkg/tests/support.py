"""Shared builders for the test suite."""

from dataclasses import replace

import numpy as np

from clode import numerics as nx
from clode.model import ModelDims
from clode.trajectory import Trajectory

TINY = ModelDims(
    obs_dim=6,
    action_dim=2,
    embed_dim=4,
    latent_dim=3,
    embed_hidden=5,
    embed_layers=2,
    enc_dyn_hidden=5,
    enc_dyn_layers=2,
    dec_dyn_hidden=6,
    dec_dyn_layers=3,
    readout_hidden=5,
    readout_layers=2,
)

# tiny widths over the full simulator observation
TINY_SIM = replace(TINY, obs_dim=66)

SMALL = ModelDims(
    embed_dim=16,
    latent_dim=6,
    embed_hidden=16,
    embed_layers=2,
    enc_dyn_hidden=16,
    dec_dyn_hidden=32,
    readout_hidden=16,
)


def random_trajectory(T, dims, rng, dt=0.1):
    return Trajectory(
        times=np.arange(T) * dt,
        actions=rng.normal(size=(T, dims.action_dim)),
        observations=rng.normal(size=(T, dims.obs_dim)),
    )


def param_fd_grad(loss_fn, param, eps=1e-6):
    """Central differences of ``loss_fn()`` with respect to a parameter tensor."""

    def f(t):
        saved = param.data
        param.data = t.data
        try:
            return loss_fn()
        finally:
            param.data = saved

    return nx.finite_diff_grad(f, param, eps=eps).data


def block_rel_err(analytic, numeric):
    """Norm-wise relative error of one gradient block."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


# acceptance results, one line per criterion, printed at the end of the run
CRITERIA: dict[int, str] = {}


class criterion:
    """Context manager that records and prints a PASS/FAIL line for one criterion."""

    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number:2d} {status}: {self.title}"
        if self.detail:
            line += f" ({self.detail})"
        if exc_type is not None and exc is not None and str(exc):
            line += f" -- {str(exc).splitlines()[0]}"
        CRITERIA[self.number] = line
        print(line)
        return False
