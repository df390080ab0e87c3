"""Adam training loop maximising the ELBO over windowed demonstrations."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .dataio import batch, save_checkpoint, stack_samples, window_history, atomic_write_text
from .model import ModelDims, ModelParams, elbo_batch, init_params
from .trajectory import Trajectory

__all__ = [
    "TrainError",
    "TrainConfig",
    "OptimizerState",
    "LogRow",
    "adam_step",
    "clip_grad_norm",
    "train",
    "write_log_csv",
    "params_checksum",
]

log = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 50
    lr: float = 1e-3
    dt: float = 0.1
    history_len: int = 5
    epochs: int = 1
    clip_norm: float = 5.0
    beta: float = 1.0
    beta_warmup: bool = False
    warmup_fraction: float = 0.1
    seed: int = 0
    stride: int = 1
    max_steps: int | None = None
    checkpoint_interval: int = 0
    checkpoint_path: str | None = None
    normalize: bool = True
    dims: ModelDims = field(default_factory=ModelDims)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise TrainError("batch size must be >= 1")
        if not self.lr > 0:
            raise TrainError("learning rate must be positive")
        if not self.dt > 0:
            raise TrainError("dt must be positive")
        if self.history_len < 2:
            raise TrainError("history length must be >= 2")
        if self.epochs < 0:
            raise TrainError("epochs must be >= 0")
        if self.beta < 0:
            raise TrainError("beta must be >= 0")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_blocks(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        out["t"] = np.array(float(self.t))
        return out

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray] | None) -> "OptimizerState":
        state = cls()
        for k, a in (blocks or {}).items():
            if k.startswith("m."):
                state.m[k[2:]] = a.copy()
            elif k.startswith("v."):
                state.v[k[2:]] = a.copy()
            elif k == "t":
                state.t = int(np.asarray(a).reshape(-1)[0])
            else:
                raise TrainError(f"unknown optimizer block {k!r}")
        return state


def adam_step(params: dict[str, nx.Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    if set(grads) != set(params):
        raise TrainError("gradients and parameters are keyed differently")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise TrainError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape)
            v = np.zeros(p.shape)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


@dataclass
class LogRow:
    step: int
    elbo: float
    recon: float
    kl: float
    grad_norm: float


def write_log_csv(rows: list[LogRow], path) -> None:
    lines = ["step,elbo,recon,kl,grad_norm"]
    lines += [f"{r.step},{r.elbo:.17g},{r.recon:.17g},{r.kl:.17g},{r.grad_norm:.17g}" for r in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def params_checksum(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, t in params.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _beta_at(config: TrainConfig, step: int, total: int) -> float:
    if not config.beta_warmup:
        return config.beta
    ramp = max(1, int(round(config.warmup_fraction * total)))
    return config.beta * min(1.0, step / ramp)


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])


def train(
    config: TrainConfig,
    dataset: list[Trajectory],
    params: ModelParams | None = None,
    optimizer: OptimizerState | None = None,
    start_step: int = 0,
) -> tuple[ModelParams, list[LogRow]]:
    """Optimise ``-mean ELBO`` over windows of length ``history_len``.

    Batches are reshuffled every epoch from ``(seed, epoch)`` and the latent
    noise of step ``s`` is drawn from ``(seed, s)``, so passing the params and
    optimizer state saved after step ``s`` with ``start_step=s`` continues the
    exact same run.
    """
    config.validate()
    if params is None:
        params = init_params(replace(config.dims, dt=config.dt), seed=config.seed)
    elif abs(params.dims.dt - config.dt) > 1e-12:
        raise TrainError(f"model dt {params.dims.dt} != config dt {config.dt}")
    optimizer = optimizer or OptimizerState()
    rows: list[LogRow] = []
    if config.epochs == 0 or (config.max_steps is not None and config.max_steps <= start_step):
        return params, rows

    samples = [s for tr in dataset for s in window_history(tr, config.history_len, config.stride)]
    if not samples:
        raise TrainError(f"no training windows of length {config.history_len} in the dataset")
    if config.normalize and start_step == 0:
        params.set_normalization(
            np.concatenate([s.observations for s in samples]), np.concatenate([s.actions for s in samples])
        )

    n_batches = -(-len(samples) // config.batch_size)
    total = config.epochs * n_batches
    if config.max_steps is not None:
        total = min(total, config.max_steps)
    named = dict(params.named_parameters())
    latent = params.dims.latent_dim

    step = 0
    for epoch in range(config.epochs):
        for chunk in batch(samples, config.batch_size, seed=_epoch_seed(config.seed, epoch)):
            if step >= total:
                break
            if step < start_step:
                step += 1
                continue
            obs, act = stack_samples(chunk)
            noise = np.random.default_rng([config.seed, step]).standard_normal((len(chunk), latent))
            beta = _beta_at(config, step, total)
            try:
                terms = elbo_batch(params, obs, act, noise, beta)
                loss = -terms.elbo.mean()
            except nx.NumericsError as exc:
                raise TrainError(f"step {step}: non-finite forward pass ({exc})") from exc
            if not np.isfinite(loss.data):
                raise TrainError(f"step {step}: non-finite loss")
            gmap = nx.backward(loss)
            grads = {k: gmap.array(t) for k, t in named.items()}
            grads, gnorm = clip_grad_norm(grads, config.clip_norm)
            if not np.isfinite(gnorm):
                raise TrainError(f"step {step}: non-finite gradient norm")
            adam_step(named, grads, optimizer, config.lr)
            row = LogRow(
                step,
                float(terms.elbo.data.mean()),
                float(terms.recon.data.mean()),
                float(terms.kl.data.mean()),
                gnorm,
            )
            rows.append(row)
            if step % 100 == 0:
                log.info("step %d elbo %.4f recon %.4f kl %.4f", step, row.elbo, row.recon, row.kl)
            step += 1
            if config.checkpoint_interval and config.checkpoint_path and step % config.checkpoint_interval == 0:
                save_checkpoint(params, optimizer.to_blocks(), step, Path(config.checkpoint_path))
        if step >= total:
            break
    return params, rows
