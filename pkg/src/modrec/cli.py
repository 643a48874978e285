"""Batch command-line front end: generate, recover, eval, fpga.

Every command is file-in/file-out, honors --seed, and drops a manifest next
to its outputs so a run can be reproduced exactly.  Exit codes are stable:
0 success, 2 usage or contract violation, 3 data/calibration problem,
4 numerical divergence.  Set SOURCE_DATE_EPOCH to pin the manifest timestamp
for byte-identical reruns.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import dynamics, fpga_cost, network, training
from .errors import (
    CalibrationError,
    ContractError,
    DataFormatError,
    DivergedError,
    ModrecError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat()


def write_manifest(path, command, seed, inputs, outputs, config_path=None, extra=None):
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "seed": seed,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "timestamp": _timestamp(),
    }
    if extra:
        manifest.update(extra)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _parse_floats(text: str, what: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(",") if v.strip() != ""])
    except ValueError:
        raise ContractError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _resolve_system(ref: str, extra_config=None) -> dynamics.DynamicalSystem:
    extra = [extra_config] if extra_config else []
    registry = dynamics.builtin_systems(extra)
    if ref in registry:
        return registry[ref]
    if Path(ref).is_file():
        return dynamics.load_system_config(ref)
    return dynamics.get_system(ref, extra)  # raises UnknownSystemError with choices


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.sigma < 0:
        raise ContractError(f"--sigma must be >= 0, got {args.sigma}")
    system = _resolve_system(args.system)
    y0 = _parse_floats(args.y0, "--y0")
    if y0.size != system.n:
        raise ContractError(
            f"--y0 has {y0.size} components, system {system.name!r} has n={system.n}"
        )
    input_signal = None
    if system.m > 0:
        const = (_parse_floats(args.input_const, "--input-const")
                 if args.input_const else np.zeros(system.m))
        if const.size != system.m:
            raise ContractError(
                f"--input-const has {const.size} components, system has m={system.m}"
            )
        input_signal = lambda t: const
    traj = dynamics.simulate(system, y0, input_signal, dt=args.dt, steps=args.steps)
    traj = dynamics.add_noise(traj, args.sigma, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dynamics.write_trajectory_csv(traj, out)
    write_manifest(
        Path(str(out) + ".manifest.json"),
        command="generate", seed=args.seed,
        inputs={"system": args.system},
        outputs={"trajectory": out},
        extra={"y0": y0.tolist(), "dt": args.dt, "steps": args.steps, "sigma": args.sigma},
    )
    print(f"wrote {out} ({traj.N} rows, n={traj.n}, m={traj.m})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# recover
# ---------------------------------------------------------------------------

_CONFIG_TYPES = {
    "batch_size": int, "window": int, "epochs": int, "learning_rate": float,
    "beta1": float, "beta2": float, "eps": float, "order": int,
    "support_size": int, "hidden": int, "seed": int, "dt": float,
    "solve_steps": int, "standardize": bool, "head_input": str,
    "sparsify_warmup": int, "sparsify_anneal": int, "early_stop_loss": float,
}


def load_train_config(path, data_dt, seed_override=None) -> training.TrainConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        read = parser.read(path)
    except configparser.Error as exc:
        raise DataFormatError(f"bad config: {exc}", path=str(path)) from None
    if not read:
        raise DataFormatError("config file not found or unreadable", path=str(path))
    if not parser.has_section("train"):
        raise DataFormatError("config needs a [train] section", path=str(path))
    kwargs = {}
    for key, raw in parser.items("train"):
        if key == "dense_hidden":
            kwargs[key] = tuple(int(v) for v in raw.split(",") if v.strip())
            continue
        if key not in _CONFIG_TYPES:
            raise DataFormatError(f"unknown train config key {key!r}", path=str(path))
        typ = _CONFIG_TYPES[key]
        try:
            kwargs[key] = parser.getboolean("train", key) if typ is bool else typ(raw)
        except ValueError:
            raise DataFormatError(
                f"key {key!r} must be {typ.__name__}, got {raw!r}", path=str(path)
            ) from None
    kwargs.setdefault("dt", data_dt)
    if seed_override is not None:
        kwargs["seed"] = seed_override
    return training.TrainConfig(**kwargs)


def cmd_recover(args) -> int:
    traj = dynamics.read_trajectory_csv(args.data)
    config = load_train_config(args.config, traj.dt, args.seed)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    recovered = training.train(config, traj)
    truth = _resolve_system(args.truth) if args.truth else None
    report = training.evaluate(recovered, traj, truth)

    ckpt_path = outdir / "checkpoint.json"
    network.save_checkpoint(ckpt_path, training.recovered_checkpoint(recovered))
    loss_path = outdir / "loss.csv"
    training.write_loss_csv(loss_path, recovered.history)
    report_path = outdir / "eval_report.json"
    training.write_eval_report(report_path, report)
    echo_path = outdir / "config_echo.txt"
    with open(echo_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(config.echo())
    outputs = {
        "checkpoint": ckpt_path, "loss_csv": loss_path,
        "eval_report": report_path, "config_echo": echo_path,
    }
    if args.eval_data:
        heldout = dynamics.read_trajectory_csv(args.eval_data)
        heldout_report = training.evaluate(recovered, heldout, truth)
        heldout_path = outdir / "eval_report_heldout.json"
        training.write_eval_report(heldout_path, heldout_report)
        outputs["eval_report_heldout"] = heldout_path
    write_manifest(
        outdir / "manifest.json", command="recover", seed=config.seed,
        inputs={"data": args.data, **({"truth": args.truth} if args.truth else {}),
                **({"eval_data": args.eval_data} if args.eval_data else {})},
        outputs=outputs, config_path=args.config,
    )
    print(f"best epoch {recovered.best_epoch}, final loss {recovered.history[-1]:.6g}")
    print(json.dumps(report.to_json_dict(), indent=1, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    data = network.load_checkpoint(args.checkpoint)
    if "recovered" not in data:
        raise DataFormatError("checkpoint has no recovered model", path=args.checkpoint)
    model, shifts = training.model_from_checkpoint(data)
    traj = dynamics.read_trajectory_csv(args.data)
    truth = _resolve_system(args.truth) if args.truth else None
    recovered = training.RecoveredModel(
        model=model, shifts=shifts, history=[], config=None, best_epoch=-1, params=None,
    )
    report = training.evaluate(recovered, traj, truth)
    if args.out:
        training.write_eval_report(args.out, report)
    print(json.dumps(report.to_json_dict(), indent=1, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# fpga
# ---------------------------------------------------------------------------

def _load_calibration(args) -> fpga_cost.CalibrationParams:
    rows = (fpga_cost.read_calibration_csv(args.calibration)
            if args.calibration else fpga_cost.shipped_calibration_rows())
    return fpga_cost.calibrate(rows)


def _opt_from_args(args, strategy) -> fpga_cost.OptimizationConfig:
    return fpga_cost.OptimizationConfig(
        strategy=strategy, ii=args.ii, unroll_factor=args.unroll_factor,
        partition=(strategy == "pipeline_unroll"), hazard_check=args.hazard_check,
    )


def cmd_fpga_estimate(args) -> int:
    params = _load_calibration(args)
    graph = fpga_cost.build_kernel_graph(args.dim, args.hidden, args.steps,
                                         args.chain_distance)
    strategies = fpga_cost.STRATEGIES if args.strategy == "all" else (args.strategy,)
    reports = [fpga_cost.estimate(graph, _opt_from_args(args, s), params)
               for s in strategies]
    print(fpga_cost.reports_to_text(reports), end="")
    if args.json:
        fpga_cost.write_reports_json(args.json, reports)
    return EXIT_OK


def cmd_fpga_calibrate(args) -> int:
    rows = (fpga_cost.read_calibration_csv(args.csv)
            if args.csv else fpga_cost.shipped_calibration_rows())
    params = fpga_cost.calibrate(rows)
    summary = {
        "kappa_s_per_cycle": params.kappa,
        "cycle_quad": list(params.cycle_quad),
        "bram_affine": list(params.bram_affine),
        "lut_affine": list(params.lut_affine),
        "dsp_affine": list(params.dsp_affine),
        "strategy_cycle_factors": params.strategy_cycle_factors,
        "residuals": params.residuals,
    }
    print(json.dumps(summary, indent=1, sort_keys=True))
    if args.json:
        with open(args.json, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def _parse_dims(text: str):
    if ".." in text:
        lo, _, rest = text.partition("..")
        hi, _, step = rest.partition(":")
        return list(range(int(lo), int(hi) + 1, int(step) if step else 10))
    return [int(v) for v in text.split(",") if v.strip()]


def cmd_fpga_sweep(args) -> int:
    params = _load_calibration(args)
    dims = _parse_dims(args.dims)
    strategies = fpga_cost.STRATEGIES if args.strategy == "all" else (args.strategy,)
    reports = []
    for d in dims:
        graph = fpga_cost.build_kernel_graph(d, args.hidden, args.steps,
                                             args.chain_distance)
        for s in strategies:
            reports.append(fpga_cost.estimate(graph, _opt_from_args(args, s), params))
    print(fpga_cost.reports_to_text(reports), end="")
    speed = fpga_cost.speedup_report(dims, params, args.hidden, args.steps)
    print("speedup (none vs pipeline_unroll):")
    for row in speed:
        print(f"  d={row['d']:<4d} {row['time_none_s']:.4f}s vs "
              f"{row['time_optimized_s']:.4f}s -> {row['speedup']:.2f}x")
    if args.json:
        fpga_cost.write_reports_json(args.json, reports)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modrec",
        description="Sparse ODE model recovery and pipeline cost estimation.",
    )
    parser.add_argument("--version", action="version", version=f"modrec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a benchmark system to CSV")
    g.add_argument("--system", required=True,
                   help="registry name (lotka_volterra, lorenz) or a system config path")
    g.add_argument("--y0", required=True, help="initial state, comma separated")
    g.add_argument("--dt", type=float, default=0.01)
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--sigma", type=float, default=0.0, help="noise std per channel")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--input-const", default=None,
                   help="constant input vector for input-driven systems")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("recover", help="train the recovery network on a trajectory CSV")
    r.add_argument("--data", required=True)
    r.add_argument("--config", required=True, help="train config file ([train] section)")
    r.add_argument("--out", required=True, help="run directory")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--truth", default=None,
                   help="system name/config for support and coefficient scoring")
    r.add_argument("--eval-data", default=None, help="held-out trajectory CSV")
    r.set_defaults(func=cmd_recover)

    e = sub.add_parser("eval", help="score a saved checkpoint against a trajectory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--truth", default=None)
    e.add_argument("--out", default=None, help="write the report JSON here")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fpga", help="pipeline latency/resource estimation")
    fsub = f.add_subparsers(dest="fpga_command", required=True)

    def _common(p):
        p.add_argument("--hidden", type=int, default=16)
        p.add_argument("--steps", type=int, default=20)
        p.add_argument("--ii", type=int, default=1, choices=(1, 2, 3))
        p.add_argument("--unroll-factor", type=int, default=4)
        p.add_argument("--chain-distance", type=int, default=1,
                       help="carried dependency distance of the chained operations")
        p.add_argument("--hazard-check", action="store_true",
                       help="error out when II cannot satisfy a carried dependency")
        p.add_argument("--calibration", default=None,
                       help="calibration CSV (default: shipped reference measurements)")
        p.add_argument("--json", default=None, help="also write the report as JSON")

    fe = fsub.add_parser("estimate", help="one dimension, one or all strategies")
    fe.add_argument("--dim", type=int, required=True)
    fe.add_argument("--strategy", default="all",
                    choices=(*fpga_cost.STRATEGIES, "all"))
    _common(fe)
    fe.set_defaults(func=cmd_fpga_estimate)

    fc = fsub.add_parser("calibrate", help="fit the cost model from a CSV")
    fc.add_argument("--csv", default=None, help="calibration CSV (default: shipped)")
    fc.add_argument("--json", default=None)
    fc.set_defaults(func=cmd_fpga_calibrate)

    fs = fsub.add_parser("sweep", help="dimension sweep with speedup summary")
    fs.add_argument("--dims", required=True, help="e.g. 20..150, 20..150:5 or 20,30,40")
    fs.add_argument("--strategy", default="all",
                    choices=(*fpga_cost.STRATEGIES, "all"))
    _common(fs)
    fs.set_defaults(func=cmd_fpga_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataFormatError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ModrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
