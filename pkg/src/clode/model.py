"""Conditional latent-ODE policy.

The encoder embeds each ``(observation, action)`` step with a deep MLP and
runs an ODE-RNN backward in time (hidden state evolved by a small neural ODE
between steps, then a GRU update at each step) to produce a diagonal Gaussian
posterior over the initial latent ``z_1``. The decoder integrates
``dz/dt = f(z)`` forward from a sample of that posterior and reads a Gaussian
action distribution off every latent state.

All batched entry points take plain numpy arrays shaped ``(B, T, dim)`` and
share one time grid ``t_i = i * dt`` across the batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import GruParams, MlpParams, Tensor
from .odesolve import SolveRequest, solve, solve_backward_in_time
from .trajectory import History, Trajectory

__all__ = [
    "SIGMA_FLOOR",
    "ModelError",
    "ModelDims",
    "ModelParams",
    "LatentPosterior",
    "ActionDistribution",
    "init_params",
    "embed_step",
    "encode",
    "encode_batch",
    "sample_latent",
    "decode",
    "decode_batch",
    "gaussian_log_prob",
    "kl_diag_gaussian",
    "elbo",
    "elbo_batch",
    "predict",
    "predict_batch",
]

SIGMA_FLOOR = 1e-3
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    obs_dim: int = 66
    action_dim: int = 2
    embed_dim: int = 64
    latent_dim: int = 16
    embed_hidden: int = 64
    embed_layers: int = 6
    enc_dyn_hidden: int = 64
    enc_dyn_layers: int = 2
    dec_dyn_hidden: int = 256
    dec_dyn_layers: int = 3
    readout_hidden: int = 64
    readout_layers: int = 3
    dt: float = 0.1
    solver_substeps: int = 4

    @property
    def solver_dt(self) -> float:
        return self.dt / self.solver_substeps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDims":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ModelError(f"unknown dims keys: {sorted(unknown)}")
        return cls(**d)


def _layer_sizes(n_in: int, hidden: int, n_out: int, layers: int) -> list[int]:
    if layers < 1:
        raise ModelError("an MLP needs at least one layer")
    return [n_in] + [hidden] * (layers - 1) + [n_out]


@dataclass
class ModelParams:
    """Learnable weights plus fixed input/output standardisation buffers."""

    dims: ModelDims
    embed: MlpParams
    enc_dynamics: MlpParams
    gru: GruParams
    posterior_head: MlpParams
    dec_dynamics: MlpParams
    readout: MlpParams
    obs_shift: np.ndarray = field(default=None)
    obs_scale: np.ndarray = field(default=None)
    act_shift: np.ndarray = field(default=None)
    act_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        d = self.dims
        if self.obs_shift is None:
            self.obs_shift = np.zeros(d.obs_dim)
        if self.obs_scale is None:
            self.obs_scale = np.ones(d.obs_dim)
        if self.act_shift is None:
            self.act_shift = np.zeros(d.action_dim)
        if self.act_scale is None:
            self.act_scale = np.ones(d.action_dim)
        checks = [
            (self.embed.in_dim, d.obs_dim + d.action_dim, "embed in"),
            (self.embed.out_dim, d.embed_dim, "embed out"),
            (self.enc_dynamics.in_dim, d.embed_dim, "encoder dynamics in"),
            (self.enc_dynamics.out_dim, d.embed_dim, "encoder dynamics out"),
            (self.gru.input_size, d.embed_dim, "gru input"),
            (self.gru.hidden_size, d.embed_dim, "gru hidden"),
            (self.posterior_head.in_dim, d.embed_dim, "posterior head in"),
            (self.posterior_head.out_dim, 2 * d.latent_dim, "posterior head out"),
            (self.dec_dynamics.in_dim, d.latent_dim, "decoder dynamics in"),
            (self.dec_dynamics.out_dim, d.latent_dim, "decoder dynamics out"),
            (self.readout.in_dim, d.latent_dim, "readout in"),
            (self.readout.out_dim, 2 * d.action_dim, "readout out"),
        ]
        for got, want, what in checks:
            if got != want:
                raise ModelError(f"{what}: dimension {got} != {want}")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return (
            self.embed.named("embed")
            + self.enc_dynamics.named("enc_dynamics")
            + self.gru.named("gru")
            + self.posterior_head.named("posterior_head")
            + self.dec_dynamics.named("dec_dynamics")
            + self.readout.named("readout")
        )

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("obs_shift", self.obs_shift),
            ("obs_scale", self.obs_scale),
            ("act_shift", self.act_shift),
            ("act_scale", self.act_scale),
        ]

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def set_normalization(self, observations: np.ndarray, actions: np.ndarray) -> None:
        """Standardise inputs/outputs with statistics of the given data."""
        obs = np.asarray(observations).reshape(-1, self.dims.obs_dim)
        act = np.asarray(actions).reshape(-1, self.dims.action_dim)
        self.obs_shift = obs.mean(axis=0)
        self.obs_scale = np.where(obs.std(axis=0) > 1e-6, obs.std(axis=0), 1.0)
        self.act_shift = act.mean(axis=0)
        self.act_scale = np.where(act.std(axis=0) > 1e-6, act.std(axis=0), 1.0)

    def copy(self) -> "ModelParams":
        fresh = init_params(self.dims, seed=0)
        for (_, dst), (_, src) in zip(fresh.named_parameters(), self.named_parameters()):
            dst.data = src.data.copy()
        for name, arr in self.buffers():
            setattr(fresh, name, arr.copy())
        return fresh


def init_params(dims: ModelDims = ModelDims(), seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    d = dims
    return ModelParams(
        dims=d,
        embed=nx.init_mlp(_layer_sizes(d.obs_dim + d.action_dim, d.embed_hidden, d.embed_dim, d.embed_layers), rng),
        enc_dynamics=nx.init_mlp(_layer_sizes(d.embed_dim, d.enc_dyn_hidden, d.embed_dim, d.enc_dyn_layers), rng),
        gru=nx.init_gru(d.embed_dim, d.embed_dim, rng),
        posterior_head=nx.init_mlp([d.embed_dim, 2 * d.latent_dim], rng),
        dec_dynamics=nx.init_mlp(_layer_sizes(d.latent_dim, d.dec_dyn_hidden, d.latent_dim, d.dec_dyn_layers), rng),
        readout=nx.init_mlp(_layer_sizes(d.latent_dim, d.readout_hidden, 2 * d.action_dim, d.readout_layers), rng),
    )


@dataclass
class LatentPosterior:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ModelError(f"posterior mu {self.mu.shape} and sigma {self.sigma.shape} differ")


@dataclass
class ActionDistribution:
    mu: Tensor
    sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ModelError(f"action mu {self.mu.shape} and sigma {self.sigma.shape} differ")


# ---------------------------------------------------------------------------
# encoder


def _check_steps(params: ModelParams, obs: np.ndarray, act: np.ndarray) -> None:
    d = params.dims
    if obs.shape[-1] != d.obs_dim:
        raise ModelError(f"observation dim {obs.shape[-1]} != {d.obs_dim}")
    if act.shape[-1] != d.action_dim:
        raise ModelError(f"action dim {act.shape[-1]} != {d.action_dim}")
    if obs.shape[:-1] != act.shape[:-1]:
        raise ModelError(f"observation steps {obs.shape[:-1]} and action steps {act.shape[:-1]} differ")


def embed_step(params: ModelParams, obs, act) -> Tensor:
    """Embedding ``e_t`` of one step (or any leading batch of steps)."""
    obs = np.asarray(obs, dtype=np.float64)
    act = np.asarray(act, dtype=np.float64)
    _check_steps(params, obs, act)
    x = np.concatenate(
        [(obs - params.obs_shift) / params.obs_scale, (act - params.act_shift) / params.act_scale], axis=-1
    )
    return nx.mlp_forward(params.embed, Tensor(x))


def encode_batch(params: ModelParams, obs: np.ndarray, act: np.ndarray) -> LatentPosterior:
    """Posterior ``q(z_1 | h_T)`` for a batch ``obs (B, T, O)``, ``act (B, T, A)``."""
    obs = np.asarray(obs, dtype=np.float64)
    act = np.asarray(act, dtype=np.float64)
    if obs.ndim != 3:
        raise ModelError(f"encode_batch expects (B, T, obs_dim), got {obs.shape}")
    _check_steps(params, obs, act)
    B, T, _ = obs.shape
    if T < 1:
        raise ModelError("history needs at least one step")
    d = params.dims
    emb = embed_step(params, obs, act)  # (B, T, E)

    def enc_f(h, t):
        return nx.mlp_forward(params.enc_dynamics, h)

    hidden = Tensor(np.zeros((B, d.embed_dim)))
    for t in range(T - 1, -1, -1):
        if t < T - 1:
            req = SolveRequest(enc_f, hidden, ((t + 1) * d.dt, t * d.dt), dt=d.solver_dt)
            hidden = solve_backward_in_time(req)[-1]
        hidden = nx.gru_cell(params.gru, hidden, emb[:, t, :])
    out = nx.mlp_forward(params.posterior_head, hidden)
    mu = out[:, : d.latent_dim]
    sigma = nx.softplus(out[:, d.latent_dim :]) + SIGMA_FLOOR
    return LatentPosterior(mu, sigma)


def encode(params: ModelParams, history: History | Trajectory) -> LatentPosterior:
    """Posterior for a single history; returns vectors of size ``latent_dim``."""
    obs, act = _history_arrays(params, history)
    post = encode_batch(params, obs[None], act[None])
    return LatentPosterior(post.mu[0], post.sigma[0])


def _history_arrays(params: ModelParams, history: History | Trajectory) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(history, Trajectory):
        return history.observations, history.actions
    return history.observations, history.padded_actions(params.dims.action_dim)


def sample_latent(posterior: LatentPosterior, noise) -> Tensor:
    """Reparameterised draw ``mu + sigma * noise``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != posterior.mu.shape:
        raise ModelError(f"noise shape {noise.shape} != latent shape {posterior.mu.shape}")
    return posterior.mu + posterior.sigma * noise


# ---------------------------------------------------------------------------
# decoder


def latent_path(params: ModelParams, z1: Tensor, times) -> list[Tensor]:
    """Latent states ``z_t`` at each requested time, starting from ``z1`` at ``times[0]``."""
    def dec_f(z, t):
        return nx.mlp_forward(params.dec_dynamics, z)

    return solve(SolveRequest(dec_f, z1, times, dt=params.dims.solver_dt))


def _readout(params: ModelParams, z: Tensor) -> ActionDistribution:
    A = params.dims.action_dim
    out = nx.mlp_forward(params.readout, z)
    mu = out[..., :A] * params.act_scale + params.act_shift
    sigma = nx.softplus(out[..., A:]) * params.act_scale + SIGMA_FLOOR
    return ActionDistribution(mu, sigma)


def decode_batch(params: ModelParams, z1: Tensor, times) -> ActionDistribution:
    """Action distributions for latent starts ``z1 (B, latent)``; tensors shaped ``(B, T, A)``."""
    times = np.asarray(times, dtype=np.float64).reshape(-1)
    if times.size > 1 and np.any(np.diff(times) <= 0):
        raise ModelError("decode times must be strictly increasing")
    if z1.shape[-1] != params.dims.latent_dim:
        raise ModelError(f"latent dim {z1.shape[-1]} != {params.dims.latent_dim}")
    path = nx.stack(latent_path(params, z1, times), axis=-2)
    return _readout(params, path)


def decode(params: ModelParams, z1: Tensor, times) -> list[ActionDistribution]:
    """One :class:`ActionDistribution` per requested time for a single latent vector."""
    dist = decode_batch(params, z1, times)
    return [ActionDistribution(dist.mu[i], dist.sigma[i]) for i in range(dist.mu.shape[0])]


# ---------------------------------------------------------------------------
# objective


def _log_prob_terms(x, mu: Tensor, sigma: Tensor) -> Tensor:
    if np.any(sigma.data < SIGMA_FLOOR * (1 - 1e-12)):
        raise ModelError("gaussian_log_prob: sigma below floor")
    z = (nx.Tensor(np.asarray(x, dtype=np.float64)) if not isinstance(x, Tensor) else x) - mu
    return -_HALF_LOG_2PI - nx.log(sigma) - nx.square(z) / (nx.square(sigma) * 2.0)


def gaussian_log_prob(x, dist: ActionDistribution) -> Tensor:
    """Log density of ``x`` under a diagonal Gaussian, summed over the last axis."""
    x_arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if x_arr.shape[-1] != dist.mu.shape[-1]:
        raise ModelError(f"gaussian_log_prob: x dim {x_arr.shape[-1]} != {dist.mu.shape[-1]}")
    return _log_prob_terms(x, dist.mu, dist.sigma).sum(axis=-1)


def kl_diag_gaussian(posterior: LatentPosterior) -> Tensor:
    """``KL(N(mu, sigma^2) || N(0, I))`` summed over the last axis."""
    mu, sigma = posterior.mu, posterior.sigma
    var = nx.square(sigma)
    return (nx.square(mu) + var - 1.0 - nx.log(var)).sum(axis=-1) * 0.5


@dataclass
class ElboTerms:
    elbo: Tensor
    recon: Tensor
    kl: Tensor
    posterior: LatentPosterior
    actions: ActionDistribution


def step_times(n: int, dt: float) -> np.ndarray:
    return np.arange(n, dtype=np.float64) * dt


def elbo_batch(params: ModelParams, obs, act, noise, beta: float = 1.0) -> ElboTerms:
    """Per-sample single-draw ELBO for a batch; ``elbo``, ``recon`` and ``kl`` have shape ``(B,)``."""
    if beta < 0:
        raise ModelError("beta must be non-negative")
    act = np.asarray(act, dtype=np.float64)
    post = encode_batch(params, obs, act)
    z1 = sample_latent(post, noise)
    dist = decode_batch(params, z1, step_times(act.shape[1], params.dims.dt))
    recon = _log_prob_terms(act, dist.mu, dist.sigma).sum(axis=(1, 2))
    kl = kl_diag_gaussian(post)
    value = recon - kl * beta if beta != 0 else recon
    return ElboTerms(value, recon, kl, post, dist)


def elbo(params: ModelParams, trajectory: Trajectory, noise, beta: float = 1.0) -> tuple[Tensor, dict]:
    """Scalar ELBO of one trajectory plus a diagnostics dict of both terms."""
    noise = np.asarray(noise, dtype=np.float64).reshape(1, -1)
    terms = elbo_batch(params, trajectory.observations[None], trajectory.actions[None], noise, beta)
    value = terms.elbo[0]
    return value, {"recon": float(terms.recon.data[0]), "kl": float(terms.kl.data[0]), "elbo": float(value.data)}


# ---------------------------------------------------------------------------
# prediction


def predict_batch(params: ModelParams, obs, act, k: int, noise=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and scale of the next ``k`` actions after each history, shaped ``(B, k, A)``.

    ``noise=None`` decodes from the posterior mean.
    """
    if k < 1:
        raise ModelError("horizon k must be >= 1")
    obs = np.asarray(obs, dtype=np.float64)
    with nx.no_grad():
        post = encode_batch(params, obs, act)
        z1 = post.mu if noise is None else sample_latent(post, noise)
        L = obs.shape[1]
        dist = decode_batch(params, z1, step_times(L + k, params.dims.dt))
    return dist.mu.data[:, L:], dist.sigma.data[:, L:]


def predict(params: ModelParams, history: History | Trajectory, k: int, noise=None) -> list[ActionDistribution]:
    obs, act = _history_arrays(params, history)
    if noise is not None:
        noise = np.asarray(noise, dtype=np.float64).reshape(1, -1)
    mu, sigma = predict_batch(params, obs[None], act[None], k, noise)
    return [ActionDistribution(Tensor(mu[0, i]), Tensor(sigma[0, i])) for i in range(k)]
