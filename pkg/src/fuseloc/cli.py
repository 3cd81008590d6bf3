"""Command-line interface.

Subcommands
-----------
``simulate``
    Build a corridor dataset from a flat key-value config.
``train``
    Train the scene error model on a dataset directory.
``eval``
    Evaluate trajectories (truth, dead reckoning, secondary estimator, fused
    with a trained model) under the segment-error protocol.
``compare``
    Full method comparison including rescaled baseline error models.

Every run writes the resolved configuration into its output directory, so
re-running with that file reproduces the outputs (all randomness is seeded).
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from .evaluation import (
    CompareResult,
    MethodRow,
    compare_methods,
    dr_trajectory,
    eso_trajectory,
    fused_trajectory,
    learned_info_provider,
    segment_errors,
)
from .info_filter import SingularStateError
from .scene_model import NetArchitecture, init_params, load_model, save_model
from .simulator import (
    SimConfig,
    build_corridor,
    load_dataset,
    save_dataset,
    serpentine_path,
    simulate_run,
    true_global_poses,
)
from .training import TrainConfig, train, write_training_log

__all__ = ["main", "entry"]


class UsageError(Exception):
    """Bad command line or malformed override."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise UsageError(message)


# --------------------------------------------------------------------------
# Flat key-value configs


def load_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments ignored."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed config line: {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_config(defaults: dict[str, str], config_path, sets: list[str]) -> dict[str, str]:
    """Defaults, overridden by a config file, overridden by ``--set key=value``."""
    resolved = dict(defaults)
    if config_path is not None:
        for key, value in load_config_file(config_path).items():
            if key not in resolved:
                raise ValueError(f"unknown config key {key!r}")
            resolved[key] = value
    for item in sets:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in resolved:
            raise UsageError(f"unknown config key {key!r}")
        resolved[key] = value.strip()
    return resolved


def write_config(path, cfg: dict[str, str]) -> None:
    with open(path, "w", newline="") as fh:
        for key in sorted(cfg):
            fh.write(f"{key} = {cfg[key]}\n")


def _f(cfg: dict[str, str], key: str) -> float:
    try:
        return float(cfg[key])
    except ValueError as err:
        raise ValueError(f"config key {key!r} is not a number: {cfg[key]!r}") from err


def _i(cfg: dict[str, str], key: str) -> int:
    try:
        return int(cfg[key])
    except ValueError as err:
        raise ValueError(f"config key {key!r} is not an integer: {cfg[key]!r}") from err


def _b(cfg: dict[str, str], key: str) -> bool:
    value = cfg[key].lower()
    if value in ("true", "1", "yes"):
        return True
    if value in ("false", "0", "no"):
        return False
    raise ValueError(f"config key {key!r} is not a boolean: {cfg[key]!r}")


# --------------------------------------------------------------------------
# simulate

_SIMULATE_DEFAULTS = {
    "corridor_length": "760.0",
    "corridor_width": "6.0",
    "end_caps": "false",
    "path_margin": "30.0",
    "path_amplitude": "0.8",
    "path_wavelength": "20.0",
    "path_y": "0.0",
    "path_step": "0.1",
    "path_phase": "0.0",
    "beams": "180",
    "max_range": "30.0",
    "odo_sigma_xy": "0.02",
    "odo_sigma_heading_deg": "0.2",
    "eso_mode": "matcher",
    "inject_sigma_along": "1.0",
    "inject_sigma_across": "0.01",
    "inject_sigma_heading_deg": "0.02",
    "inject_axis_deg": "0.0",
    "gps_sigma_pos": "0.05",
    "gps_sigma_heading_deg": "0.1",
    "gps_every": "25",
    "trigger_dist": "1.0",
    "trigger_heading_deg": "30.0",
    "match_window_xy": "2.4",
    "match_window_heading_deg": "10.0",
    "match_res_xy": "0.1",
    "match_res_heading_deg": "0.5",
    "seed": "0",
}


def _cmd_simulate(args) -> int:
    cfg = resolve_config(_SIMULATE_DEFAULTS, args.config, args.set or [])
    world = build_corridor(_f(cfg, "corridor_length"), _f(cfg, "corridor_width"), _b(cfg, "end_caps"))
    margin = _f(cfg, "path_margin")
    path = serpentine_path(
        margin,
        _f(cfg, "corridor_length") - margin,
        _f(cfg, "path_amplitude"),
        _f(cfg, "path_wavelength"),
        _f(cfg, "path_y"),
        _f(cfg, "path_step"),
        _f(cfg, "path_phase"),
    )
    sigma_xy = _f(cfg, "odo_sigma_xy")
    sim_cfg = SimConfig(
        beams=_i(cfg, "beams"),
        max_range=_f(cfg, "max_range"),
        odo_noise=np.diag(
            [sigma_xy**2, sigma_xy**2, math.radians(_f(cfg, "odo_sigma_heading_deg")) ** 2]
        ),
        eso_mode=cfg["eso_mode"],
        inject_sigma_along=_f(cfg, "inject_sigma_along"),
        inject_sigma_across=_f(cfg, "inject_sigma_across"),
        inject_sigma_heading=math.radians(_f(cfg, "inject_sigma_heading_deg")),
        inject_axis=math.radians(_f(cfg, "inject_axis_deg")),
        gps_sigma_pos=_f(cfg, "gps_sigma_pos"),
        gps_sigma_heading=math.radians(_f(cfg, "gps_sigma_heading_deg")),
        gps_every=_i(cfg, "gps_every"),
        trigger_dist=_f(cfg, "trigger_dist"),
        trigger_heading=math.radians(_f(cfg, "trigger_heading_deg")),
        match_window_xy=_f(cfg, "match_window_xy"),
        match_window_heading=math.radians(_f(cfg, "match_window_heading_deg")),
        match_res_xy=_f(cfg, "match_res_xy"),
        match_res_heading=math.radians(_f(cfg, "match_res_heading_deg")),
        seed=_i(cfg, "seed"),
    )
    dataset = simulate_run(world, path, sim_cfg)
    save_dataset(args.out, dataset)
    write_config(os.path.join(args.out, "config.txt"), cfg)
    print(f"wrote {len(dataset.frames)} frames to {args.out}")
    return 0


# --------------------------------------------------------------------------
# train

_TRAIN_DEFAULTS = {
    "epochs": "30",
    "steps": "100",
    "learning_rate": "0.001",
    "clip_norm": "1.0",
    "heading_weight": "100.0",
    "segmentation": "fixed",
    "gate_factor": "3.0",
    "init_sigma0": "0.001",
    "nominal_sigma": "0.1",
    "seed": "0",
    "grid_width": "50",
    "grid_height": "50",
    "grid_cell_size": "2.4",
}


def _cmd_train(args) -> int:
    cfg = resolve_config(_TRAIN_DEFAULTS, args.config, args.set or [])
    dataset = load_dataset(args.dataset)
    arch = NetArchitecture(grid_height=_i(cfg, "grid_height"), grid_width=_i(cfg, "grid_width"))
    params = init_params(arch, seed=_i(cfg, "seed"), nominal_sigma=_f(cfg, "nominal_sigma"))
    train_cfg = TrainConfig(
        steps=_i(cfg, "steps"),
        heading_weight=_f(cfg, "heading_weight"),
        learning_rate=_f(cfg, "learning_rate"),
        clip_norm=_f(cfg, "clip_norm"),
        epochs=_i(cfg, "epochs"),
        segmentation=cfg["segmentation"],
        gate_factor=_f(cfg, "gate_factor"),
        init_sigma0=_f(cfg, "init_sigma0"),
        grid_cell_size=_f(cfg, "grid_cell_size"),
    )
    checkpoints = os.path.join(args.out, "checkpoints")
    os.makedirs(checkpoints, exist_ok=True)
    result = train(dataset, train_cfg, params, checkpoint_dir=checkpoints)
    save_model(os.path.join(args.out, "model.mdl"), result.params)
    write_training_log(os.path.join(args.out, "loss_trace.csv"), result.trace)
    from .plots import save_loss_curve

    save_loss_curve(os.path.join(args.out, "loss_curve.png"), result.trace)
    write_config(os.path.join(args.out, "config.txt"), cfg)
    if result.trace:
        print(
            f"trained {len(result.trace)} epochs, "
            f"final mean loss {result.trace[-1].mean_loss:.6g} "
            f"({result.skipped_updates} skipped updates)"
        )
    return 0


# --------------------------------------------------------------------------
# eval / compare

_EVAL_DEFAULTS = {
    "seg_len": "40.0",
}

_COMPARE_DEFAULTS = {
    "seg_len": "40.0",
    "base_sigma": "0.1",
    "calibration_split": "0.5",
    "methods": "dr,eso,fused_fixed,fused_hessian,fused_sampling,fused_learned",
}


def _write_trajectory_csv(path, truth: np.ndarray, trajectories: dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("t,x,y,theta,source\n")
        for name, traj in [("truth", truth)] + list(trajectories.items()):
            for t, row in enumerate(traj):
                fh.write(f"{t},{row[0]!r},{row[1]!r},{row[2]!r},{name}\n")


def _write_stats_csv(path, rows: list[MethodRow]) -> None:
    lines = CompareResult(rows, {}, np.zeros((0, 3)), 0).to_csv_lines()
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def _cmd_eval(args) -> int:
    from .plots import save_information_ellipses, save_segment_error_plot, save_trajectory_plot

    cfg = resolve_config(_EVAL_DEFAULTS, args.config, args.set or [])
    dataset = load_dataset(args.dataset)
    seg_len = _f(cfg, "seg_len")
    truth = true_global_poses(dataset)
    trajectories = {"dr": dr_trajectory(dataset), "eso": eso_trajectory(dataset)}
    model = None
    if args.model is not None:
        model = load_model(args.model)
        trajectories["fused_learned"] = fused_trajectory(
            dataset, learned_info_provider(dataset, model)
        )
    rows = [
        MethodRow(name, math.nan, segment_errors(traj, truth, seg_len))
        for name, traj in trajectories.items()
    ]

    os.makedirs(args.out, exist_ok=True)
    _write_trajectory_csv(os.path.join(args.out, "trajectory.csv"), truth, trajectories)
    _write_stats_csv(os.path.join(args.out, "segment_stats.csv"), rows)
    save_trajectory_plot(os.path.join(args.out, "trajectory.png"), truth, trajectories)
    save_segment_error_plot(os.path.join(args.out, "segment_errors.png"), rows)
    if model is not None:
        save_information_ellipses(
            os.path.join(args.out, "information_ellipses.png"), dataset, model
        )
    write_config(os.path.join(args.out, "config.txt"), cfg)
    for row in rows:
        print(
            f"{row.name}: mean segment error {row.stats.dist_mean:.4f} m, "
            f"{row.stats.heading_mean:.6f} rad"
        )
    return 0


def _cmd_compare(args) -> int:
    from .plots import save_segment_error_plot, save_trajectory_plot

    cfg = resolve_config(_COMPARE_DEFAULTS, args.config, args.set or [])
    dataset = load_dataset(args.dataset)
    model = load_model(args.model) if args.model is not None else None
    methods = tuple(m.strip() for m in cfg["methods"].split(",") if m.strip())
    result = compare_methods(
        dataset,
        model,
        methods=methods,
        seg_len=_f(cfg, "seg_len"),
        base_sigma=_f(cfg, "base_sigma"),
        calibration_split=_f(cfg, "calibration_split"),
    )

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "metrics.csv"), "w", newline="") as fh:
        fh.write("\n".join(result.to_csv_lines()) + "\n")
    _write_trajectory_csv(
        os.path.join(args.out, "trajectory.csv"), result.truth, result.trajectories
    )
    save_trajectory_plot(os.path.join(args.out, "trajectory.png"), result.truth, result.trajectories)
    save_segment_error_plot(os.path.join(args.out, "segment_errors.png"), result.rows)
    write_config(os.path.join(args.out, "config.txt"), cfg)
    for row in result.rows:
        scale = f" (scale {row.scale:g})" if math.isfinite(row.scale) else ""
        print(
            f"{row.name}{scale}: mean segment error {row.stats.dist_mean:.4f} m, "
            f"{row.stats.heading_mean:.6f} rad over {row.stats.count} segments"
        )
    return 0


# --------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="fuseloc", description="Fusion localization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="generate a simulated dataset")
    p_sim.add_argument("--out", required=True, help="output dataset directory")
    p_sim.add_argument("--config", help="key-value config file")
    p_sim.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p_sim.set_defaults(fn=_cmd_simulate)

    p_train = sub.add_parser("train", help="train the scene error model")
    p_train.add_argument("--dataset", required=True, help="dataset directory")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--config", help="key-value config file")
    p_train.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_train.set_defaults(fn=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate trajectories on a dataset")
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--model", help="trained model file")
    p_eval.add_argument("--config", help="key-value config file")
    p_eval.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_eval.set_defaults(fn=_cmd_eval)

    p_cmp = sub.add_parser("compare", help="compare error models on a dataset")
    p_cmp.add_argument("--dataset", required=True)
    p_cmp.add_argument("--out", required=True)
    p_cmp.add_argument("--model", help="trained model file")
    p_cmp.add_argument("--config", help="key-value config file")
    p_cmp.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_cmp.set_defaults(fn=_cmd_compare)

    return parser


def main(argv=None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "out", None):
            os.makedirs(args.out, exist_ok=True)
        return args.fn(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (SingularStateError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
