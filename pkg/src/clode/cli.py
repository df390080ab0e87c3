"""Command-line entry point: ``python -m clode <command> [flags]``.

Commands: ``gen-data``, ``train``, ``rollout``, ``eval``, ``ablate``.
Settings resolve as flags > ``--config`` file (flat ``key = value``) >
built-in defaults. ``CLODE_SEED`` supplies the seed when nothing else does.
"""

from __future__ import annotations

import argparse
import datetime
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .dataio import (
    atomic_write_text,
    load_checkpoint,
    load_trajectories,
    save_checkpoint,
    save_trajectories,
    trajectories_to_csv,
)
from .evaluator import (
    ablation,
    ablation_csv,
    ablation_summary_csv,
    evaluate_rollout,
    format_report_row,
    metrics_csv,
    per_agent_csv,
    ClodePolicy,
)
from .model import ModelDims, init_params
from .simenv import ExpertConfig, LaneGeometry, WorldState, ZeroActionPolicy, generate_expert, rollout
from .trainer import OptimizerState, TrainConfig, train, write_log_csv
from .trajectory import History

log = logging.getLogger("clode")


class UsageError(Exception):
    pass


_DIMS_PRESETS = {
    "default": ModelDims(),
    "small": ModelDims(embed_dim=16, latent_dim=8, embed_hidden=32, enc_dyn_hidden=32, dec_dyn_hidden=64, readout_hidden=32),
}

# per-command defaults; keys double as config-file keys
DEFAULTS: dict[str, dict[str, object]] = {
    "gen-data": {
        "agents": 22, "steps": 500, "dt": 0.1, "lanes": 5, "lane_width": 3.7,
        "lane_change_frac": 0.3, "noise": 1.0, "seed": None, "out": None,
    },
    "train": {
        "data": None, "history_len": 5, "batch": 50, "lr": 1e-3, "epochs": 1, "max_steps": 0,
        "stride": 1, "beta": 1.0, "beta_warmup": False, "clip": 5.0, "dims": "default",
        "checkpoint_interval": 0, "seed": None, "out": None,
    },
    "rollout": {
        "ckpt": None, "data": None, "history_len": 0, "horizon": 200, "mode": "deterministic",
        "start": 0, "seed": None, "out": None,
    },
    "eval": {
        "ckpt": None, "data": None, "history_len": 0, "horizon": 200, "mode": "deterministic",
        "n_samples": 0, "stride": 0, "open_loop": False, "baseline": False, "seed": None, "out": None,
    },
    "ablate": {
        "data": None, "eval_data": None, "history_lens": "5,10,20,50,100", "horizon": 25, "batch": 50,
        "lr": 1e-3, "epochs": 1, "max_steps": 200, "stride": 1, "beta": 1.0, "clip": 5.0, "dims": "default",
        "n_samples": 0, "report_step": 25, "seed": None, "out": None,
    },
}

_REQUIRED = {
    "gen-data": ("out",),
    "train": ("data", "out"),
    "rollout": ("ckpt", "data", "out"),
    "eval": ("ckpt", "data", "out"),
    "ablate": ("data", "out"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="clode", description="Conditional latent-ODE trajectory prediction.")
    p.add_argument("--version", action="version", version=f"clode {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, defaults in DEFAULTS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", default=None, help="flat key = value file")
        sp.add_argument("-v", "--verbose", action="store_true")
        for key, val in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(val, bool):
                sp.add_argument(flag, dest=key, action="store_const", const=True, default=None)
            else:
                sp.add_argument(flag, dest=key, default=None)
    return p


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def _coerce(key: str, raw, default):
    if raw is None:
        return None
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        s = str(raw).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"--{key.replace('_', '-')}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"--{key.replace('_', '-')}: invalid value {raw!r}") from None
    if key == "seed":
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"--seed: invalid value {raw!r}") from None
    return raw


def resolve_config(command: str, flags: dict, config_path: str | None) -> dict:
    defaults = DEFAULTS[command]
    file_vals = read_config_file(config_path) if config_path else {}
    unknown = sorted(set(file_vals) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    cfg = {}
    for key, default in defaults.items():
        val = flags.get(key)
        if val is None:
            val = file_vals.get(key)
        cfg[key] = _coerce(key, val, default) if val is not None else default
    if cfg.get("seed") is None:
        env = os.environ.get("CLODE_SEED")
        cfg["seed"] = _coerce("seed", env, 0) if env is not None else 0
    for key in _REQUIRED[command]:
        if cfg.get(key) in (None, ""):
            raise UsageError(f"{command}: --{key.replace('_', '-')} is required")
    return cfg


def _write_manifest(out: Path, command: str, cfg: dict, extra: dict | None = None) -> None:
    lines = [
        f"command = {command}",
        f"version = {__version__}",
        f"timestamp = {datetime.datetime.now(datetime.timezone.utc).isoformat()}",
    ]
    lines += [f"{k} = {v}" for k, v in sorted(cfg.items())]
    lines += [f"{k} = {v}" for k, v in sorted((extra or {}).items())]
    atomic_write_text(out / "manifest.txt", "\n".join(lines) + "\n")


def _world_file(data_dir: Path) -> dict[str, str]:
    f = data_dir / "world.txt"
    return read_config_file(f) if f.exists() else {}


def _load_data(path) -> tuple[list, LaneGeometry]:
    path = Path(path)
    csv = path / "trajectories.csv" if path.is_dir() else path
    if not csv.exists():
        raise FileNotFoundError(f"no trajectory file at {csv}")
    world = _world_file(csv.parent)
    lanes = LaneGeometry(int(world.get("lanes", 5)), float(world.get("lane_width", 3.7)))
    return load_trajectories(csv, lanes=lanes), lanes


def cmd_gen_data(cfg: dict) -> None:
    out = Path(cfg["out"])
    conf = ExpertConfig(
        n_agents=cfg["agents"], n_steps=cfg["steps"], dt=cfg["dt"], n_lanes=cfg["lanes"],
        lane_width=cfg["lane_width"], lane_keep_fraction=1.0 - cfg["lane_change_frac"],
        lane_change_fraction=cfg["lane_change_frac"], noise_scale=cfg["noise"], seed=cfg["seed"],
    )
    trajs = generate_expert(conf)
    save_trajectories(trajs, out / "trajectories.csv")
    atomic_write_text(
        out / "world.txt", f"lanes = {conf.n_lanes}\nlane_width = {conf.lane_width!r}\ndt = {conf.dt!r}\n"
    )
    _write_manifest(out, "gen-data", cfg)
    log.info("wrote %d trajectories of %d steps to %s", len(trajs), conf.n_steps, out)


def _train_config(cfg: dict, history_len: int, dt: float) -> TrainConfig:
    if cfg["dims"] not in _DIMS_PRESETS:
        raise UsageError(f"--dims: unknown preset {cfg['dims']!r} (choose from {', '.join(_DIMS_PRESETS)})")
    return TrainConfig(
        batch_size=cfg["batch"], lr=cfg["lr"], dt=dt, history_len=history_len, epochs=cfg["epochs"],
        clip_norm=cfg["clip"], beta=cfg["beta"], beta_warmup=bool(cfg.get("beta_warmup", False)),
        seed=cfg["seed"], stride=cfg["stride"], max_steps=cfg["max_steps"] or None,
        dims=replace(_DIMS_PRESETS[cfg["dims"]], dt=dt),
    )


def cmd_train(cfg: dict) -> None:
    out = Path(cfg["out"])
    trajs, _ = _load_data(cfg["data"])
    dt = trajs[0].dt if trajs else 0.1
    tc = _train_config(cfg, cfg["history_len"], dt)
    if cfg["checkpoint_interval"]:
        tc.checkpoint_interval = cfg["checkpoint_interval"]
        tc.checkpoint_path = str(out / "model_latest.ckpt")
    params = init_params(tc.dims, seed=tc.seed)
    opt = OptimizerState()
    params, rows = train(tc, trajs, params=params, optimizer=opt)
    step = rows[-1].step + 1 if rows else 0
    save_checkpoint(params, opt.to_blocks(), step, out / "model.ckpt", extra={"history_len": tc.history_len})
    write_log_csv(rows, out / "train_log.csv")
    _write_manifest(out, "train", cfg, {"steps_run": step, "parameters": params.num_parameters()})


def _ckpt_history_len(ckpt, cfg) -> int:
    if cfg["history_len"]:
        return cfg["history_len"]
    return int((ckpt.meta or {}).get("history_len", 5))


def cmd_rollout(cfg: dict) -> None:
    out = Path(cfg["out"])
    ckpt = load_checkpoint(cfg["ckpt"])
    trajs, lanes = _load_data(cfg["data"])
    L, H, s = _ckpt_history_len(ckpt, cfg), cfg["horizon"], cfg["start"]
    members = [tr for tr in trajs if len(tr) >= s + L + 1]
    if not members:
        raise ValueError(f"no trajectory has the {s + L + 1} steps needed to start a rollout")
    world = WorldState(
        np.stack([tr.states[s + L] for tr in members]), lanes=lanes, time=float(members[0].times[s + L]),
        dt=members[0].dt, prev_actions=np.stack([tr.actions[s + L - 1] for tr in members]),
        agent_ids=np.array([tr.agent_id for tr in members]),
    )
    hists = [History(tr.observations[s : s + L], tr.actions[s : s + L]) for tr in members]
    timings: list[float] = []
    pred = rollout(world, ClodePolicy(ckpt.params, L), H, mode=cfg["mode"], seed=cfg["seed"],
                   histories=hists, max_history=L, timings=timings)
    atomic_write_text(out / "predicted.csv", trajectories_to_csv(pred))
    # wall times vary run to run; kept out of the deterministic artifacts
    lines = ["step,wall_time_s"] + [f"{k + 1},{t:.6f}" for k, t in enumerate(timings)]
    atomic_write_text(out / "step_times.txt", "\n".join(lines) + "\n")
    _write_manifest(out, "rollout", cfg, {
        "agents": len(members), "mean_step_wall_time_s": f"{np.mean(timings):.6f}",
        "total_wall_time_s": f"{np.sum(timings):.6f}",
    })
    log.info("rolled out %d agents for %d steps, %.4f s per step", len(members), H, np.mean(timings))


def cmd_eval(cfg: dict) -> None:
    out = Path(cfg["out"])
    ckpt = load_checkpoint(cfg["ckpt"])
    trajs, lanes = _load_data(cfg["data"])
    L = _ckpt_history_len(ckpt, cfg)
    kwargs = dict(
        horizon=cfg["horizon"], history_len=L, n_samples=cfg["n_samples"] or None, mode=cfg["mode"],
        seed=cfg["seed"], stride=cfg["stride"] or None, lanes=lanes,
    )
    rec = evaluate_rollout(ckpt.params, trajs, open_loop=cfg["open_loop"], **kwargs)
    atomic_write_text(out / "metrics.csv", metrics_csv(rec))
    atomic_write_text(out / "metrics_per_agent.csv", per_agent_csv(rec))
    report = [format_report_row(f"cLODE with {L} obs", rec)]
    if cfg["baseline"]:
        base = evaluate_rollout(lambda: ZeroActionPolicy(), trajs, **kwargs)
        atomic_write_text(out / "metrics_baseline.csv", metrics_csv(base))
        report.append(format_report_row("constant velocity", base))
    atomic_write_text(out / "report.txt", "\n".join(report) + "\n")
    _write_manifest(out, "eval", cfg, {"samples": rec.m, "skipped": rec.skipped})
    for line in report:
        print(line)


def cmd_ablate(cfg: dict) -> None:
    out = Path(cfg["out"])
    trajs, lanes = _load_data(cfg["data"])
    eval_trajs, eval_lanes = _load_data(cfg["eval_data"]) if cfg["eval_data"] else (trajs, lanes)
    try:
        lengths = [int(x) for x in str(cfg["history_lens"]).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--history-lens: expected comma-separated integers, got {cfg['history_lens']!r}") from None
    if not lengths:
        raise UsageError("--history-lens is empty")
    dt = trajs[0].dt

    def train_fn(L: int):
        tc = _train_config(cfg, L, dt)
        params, _ = train(tc, trajs, params=init_params(tc.dims, seed=tc.seed))
        return params

    table = ablation(train_fn, eval_trajs, lengths, horizon=cfg["horizon"], seed=cfg["seed"],
                     n_samples=cfg["n_samples"] or None, lanes=eval_lanes)
    atomic_write_text(out / "ablation.csv", ablation_csv(table))
    atomic_write_text(out / "ablation_summary.csv", ablation_summary_csv(table, cfg["report_step"]))
    _write_manifest(out, "ablate", cfg)
    for L, rec in table.items():
        print(format_report_row(f"cLODE with {L} obs", rec, cfg["report_step"]))


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "rollout": cmd_rollout,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("a command is required: " + ", ".join(_COMMANDS))
        flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
        cfg = resolve_config(ns.command, flags, ns.config)
    except UsageError as exc:
        print(f"clode: usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        _COMMANDS[ns.command](cfg)
    except UsageError as exc:
        print(f"clode: usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported with its origin module
        module = type(exc).__module__.replace("clode.", "")
        print(f"clode {ns.command}: {module}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
