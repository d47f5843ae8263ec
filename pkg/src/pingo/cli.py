"""Command-line interface: ``pingo gen | train | eval <protocol> | export-traj``.

Settings come from built-in defaults, then an optional JSON config file
(``--config``), then the ``PINGO_OUTPUT_DIR`` environment variable for the
output directory, then command-line flags; later sources win. The
effective configuration is written to ``<out>/config.json``.

Exit codes: 0 success, 1 a requested check failed, 2 usage or invalid
configuration, 3 numerical divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import build_dataset, load_dataset
from .egnn import DirectEgnn, DirectEgnnConfig, EgnnConfig
from .evaluation import (
    EvalReport,
    compare_numerical,
    equivariance_audit,
    eval_direct,
    eval_intermediate,
    eval_rollout,
    model_hash,
    tau_scan,
    truncation_scan,
)
from .integrator import IntegratorConfig, PingoModel, rollout, write_path_csv
from .physics import GenerationConfig, SYSTEM_KINDS, sample_initial
from .training import TrainConfig, TrainingDivergedError, load_model, make_samples, train

log = logging.getLogger("pingo")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4
OUTPUT_ENV = "PINGO_OUTPUT_DIR"

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "generation": {
        "system": "gravity",
        "n_bodies": 5,
        "n_train": 300,
        "n_valid": 100,
        "n_test": 100,
        "total_steps": 10000,
        "dt": 0.001,
        "sample_every": 250,
        "softening": None,
        "interaction_strength": 1.0,
    },
    "model": {
        "kind": "pingo",
        "n_layers": 4,
        "hidden_dim": 64,
        "normalize_diff": True,
        "accel_range": 10.0,
        "persist_h": False,
    },
    "integrator": {"tau": 8, "horizon": 1.0, "variant": "second_order"},
    "training": {
        "batch_size": 100,
        "epochs": 300,
        "lr": 3e-3,
        "weight_decay": 1e-10,
        "patience": 50,
    },
    "evaluation": {
        "data": None,
        "checkpoint": None,
        "split": "test",
        "horizons": [1.0],
        "fractions": ["1/4", "1/2", "3/4", "1"],
        "windows": 10,
        "dts": [0.2, 0.1, 0.05, 0.025],
        "taus": [1, 2, 4, 8],
        "seeds": [0, 1, 2],
        "transforms": 100,
        "threshold": 1e-6,
        "n_systems": 10,
        "indices": [0],
    },
}


class UsageError(ValueError):
    pass


# -- config plumbing -------------------------------------------------------------

def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if key not in out:
            raise UsageError(f"unknown config key {path}{key!r}")
        if isinstance(out[key], dict) and out[key] is not None:
            if not isinstance(value, dict):
                raise UsageError(f"config key {path}{key!r} must be a mapping")
            out[key] = _merge(out[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(Fraction(t)) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _csv_fractions(text: str) -> list[str]:
    try:
        return [str(Fraction(t.strip())) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated fractions, got {text!r}") from exc


def _variant(text: str) -> str:
    v = text.replace("-", "_")
    if v not in ("second_order", "first_order"):
        raise argparse.ArgumentTypeError("variant must be second-order or first-order")
    return v


# (flag dest) -> (section, key); section None means top level
FLAG_MAP = {
    "seed": (None, "seed"),
    "out": (None, "output_dir"),
    "system": ("generation", "system"),
    "n_bodies": ("generation", "n_bodies"),
    "n_train": ("generation", "n_train"),
    "n_valid": ("generation", "n_valid"),
    "n_test": ("generation", "n_test"),
    "steps": ("generation", "total_steps"),
    "dt": ("generation", "dt"),
    "sample_every": ("generation", "sample_every"),
    "softening": ("generation", "softening"),
    "strength": ("generation", "interaction_strength"),
    "model": ("model", "kind"),
    "layers": ("model", "n_layers"),
    "hidden": ("model", "hidden_dim"),
    "accel_range": ("model", "accel_range"),
    "tau": ("integrator", "tau"),
    "horizon": ("integrator", "horizon"),
    "variant": ("integrator", "variant"),
    "batch_size": ("training", "batch_size"),
    "epochs": ("training", "epochs"),
    "lr": ("training", "lr"),
    "weight_decay": ("training", "weight_decay"),
    "patience": ("training", "patience"),
    "data": ("evaluation", "data"),
    "checkpoint": ("evaluation", "checkpoint"),
    "split": ("evaluation", "split"),
    "horizons": ("evaluation", "horizons"),
    "fractions": ("evaluation", "fractions"),
    "windows": ("evaluation", "windows"),
    "dts": ("evaluation", "dts"),
    "taus": ("evaluation", "taus"),
    "seeds": ("evaluation", "seeds"),
    "transforms": ("evaluation", "transforms"),
    "threshold": ("evaluation", "threshold"),
    "n_systems": ("evaluation", "n_systems"),
    "indices": ("evaluation", "indices"),
}


def effective_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if getattr(args, "config", None):
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise OSError(f"cannot read config file {args.config}: {exc}") from exc
        try:
            cfg = _merge(cfg, json.loads(text))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from exc
    if os.environ.get(OUTPUT_ENV):
        cfg["output_dir"] = os.environ[OUTPUT_ENV]
    for dest, (section, key) in FLAG_MAP.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            cfg[key] = value
        else:
            cfg[section][key] = value
    if getattr(args, "no_normalize_diff", False):
        cfg["model"]["normalize_diff"] = False
    if getattr(args, "no_accel_range", False):
        cfg["model"]["accel_range"] = None
    return cfg


def _echo_config(cfg: dict, out: Path, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({"command": command, **cfg}, indent=2, sort_keys=True) + "\n")


def _generation_config(cfg: dict) -> GenerationConfig:
    g = cfg["generation"]
    if g["system"] not in SYSTEM_KINDS:
        raise UsageError(f"unknown system {g['system']!r}; choose from {SYSTEM_KINDS}")
    return GenerationConfig(seed=cfg["seed"], **g)


def build_model(cfg: dict, d_node: int, seed: int | None = None):
    m, it = cfg["model"], cfg["integrator"]
    seed = cfg["seed"] if seed is None else seed
    if m["kind"] == "pingo":
        egnn = EgnnConfig(
            n_layers=m["n_layers"],
            hidden_dim=m["hidden_dim"],
            d_node=d_node,
            persist_h=m["persist_h"],
            normalize_diff=m["normalize_diff"],
            accel_range=m["accel_range"],
        )
        return PingoModel.create(egnn, IntegratorConfig(it["tau"], it["horizon"]), it["variant"], seed)
    if m["kind"] == "direct":
        return DirectEgnn(DirectEgnnConfig(m["n_layers"], m["hidden_dim"], d_node, it["horizon"]), seed)
    raise UsageError(f"unknown model kind {m['kind']!r}; choose pingo or direct")


def _train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"] if seed is None else seed, **cfg["training"])


def _require(cfg: dict, key: str) -> str:
    value = cfg["evaluation"][key]
    if value is None:
        raise UsageError(f"--{key} is required for this command")
    if not Path(value).exists():
        raise OSError(f"{key} path {value} does not exist")
    return value


# -- commands --------------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    gen = _generation_config(cfg)
    out = Path(cfg["output_dir"])
    build_dataset(gen, out)
    _echo_config(cfg, out, "gen")
    manifest = json.loads((out / "manifest.json").read_text())
    print(
        f"wrote {out}: {manifest['system']} N={manifest['n_bodies']} "
        f"counts={manifest['counts']} frames={manifest['n_frames']} "
        f"softening={manifest['softening']} rejections={manifest['rejections']}"
    )
    return EXIT_OK


def cmd_train(cfg: dict, resume: str | None) -> int:
    data = load_dataset(_require(cfg, "data"))
    horizon = cfg["integrator"]["horizon"]
    train_s = make_samples(data["train"], horizon)
    valid_s = make_samples(data["valid"], horizon)
    model = build_model(cfg, data["train"].attributes.shape[-1])
    out = Path(cfg["output_dir"])
    _echo_config(cfg, out, "train")
    if resume is not None and not Path(resume).exists():
        raise OSError(f"resume checkpoint {resume} does not exist")
    result = train(
        model, train_s, valid_s, _train_config(cfg),
        log_path=out / "train_log.jsonl", checkpoint_dir=out / "checkpoints", resume_from=resume,
    )
    print(f"best epoch {result.best_epoch}, valid MSE {result.best_valid_mse:.6g}; checkpoint {out / 'checkpoints' / 'best.ckpt'}")
    return EXIT_OK


def _report_metadata(cfg: dict, model=None, ts=None) -> dict:
    meta = {"seed": cfg["seed"], "evaluation": cfg["evaluation"]}
    if model is not None:
        meta["model_hash"] = model_hash(model)
        meta["model_config"] = model.config_dict()
    if ts is not None:
        meta["dataset_hash"] = ts.digest()
    return meta


def _finish_report(report: EvalReport, out: Path) -> None:
    report.to_json(out / "report.json")
    report.write_csv(out)


def cmd_eval(cfg: dict, protocol: str) -> int:
    ev = cfg["evaluation"]
    out = Path(cfg["output_dir"])
    _echo_config(cfg, out, f"eval {protocol}")
    report = EvalReport()
    status = EXIT_OK

    if protocol == "truncation":
        g = _generation_config(cfg)
        states = [sample_initial(g, np.random.default_rng([cfg["seed"], 3, i]), i) for i in range(ev["n_systems"])]
        q = np.stack([s.q for s in states])
        v = np.stack([s.v for s in states])
        h = np.stack([s.h for s in states])
        report.truncation = truncation_scan(
            q, v, h, g.system, ev["dts"], g.softening, g.interaction_strength, cfg["integrator"]["horizon"]
        )
        report.metadata = _report_metadata(cfg)
        _finish_report(report, out)
        print(f"local slope {report.truncation['local_slope']:.4f}")
        print(f"global slope {report.truncation['global_slope']:.4f}")
        return status

    ts = load_dataset(_require(cfg, "data"))[ev["split"]]
    horizon = cfg["integrator"]["horizon"]

    if protocol == "numerical":
        report.numerical = compare_numerical(ts, ev["dts"], ev["windows"], horizon)
        report.metadata = _report_metadata(cfg, ts=ts)
        _finish_report(report, out)
        for dt, curve in report.numerical.items():
            print(f"dt={dt}: window-1 MSE {curve[0]:.6g}, window-{len(curve)} MSE {curve[-1]:.6g}")
        return status

    if protocol == "tau-scan":
        data = load_dataset(ev["data"])
        train_s = make_samples(data["train"], horizon)
        valid_s = make_samples(data["valid"], horizon)
        d_node = data["train"].attributes.shape[-1]

        def fit(tau, seed):
            c = copy.deepcopy(cfg)
            c["integrator"]["tau"] = tau
            model = build_model(c, d_node, seed)
            train(model, train_s, valid_s, _train_config(c, seed),
                  log_path=out / f"tau{tau}_seed{seed}.jsonl")
            return model

        report.tau_scan, per_seed = tau_scan(ev["taus"], fit, ts, ev["seeds"], horizon)
        report.metadata = {**_report_metadata(cfg, ts=ts), "per_seed": per_seed}
        _finish_report(report, out)
        for tau, mse in report.tau_scan.items():
            print(f"tau={tau}: MSE {mse:.6g}")
        return status

    model, _ = load_model(_require(cfg, "checkpoint"))
    report.metadata = _report_metadata(cfg, model, ts)
    if protocol == "direct":
        report.direct = eval_direct(model, ts, ev["horizons"])
        for k, v in report.direct.items():
            print(f"horizon {k}: MSE {v:.6g}")
    elif protocol == "intermediate":
        report.intermediate = eval_intermediate(model, ts, [Fraction(f) for f in ev["fractions"]], horizon)
        for k, v in report.intermediate.items():
            print(f"fraction {k}: MSE {v:.6g}")
    elif protocol == "rollout":
        report.rollout = eval_rollout(model, ts, ev["windows"], horizon)
        for r in report.rollout:
            if r["n_diverged"]:
                report.flags.append(f"window {r['window']}: {r['n_diverged']} systems diverged")
        last = report.rollout[-1]
        print(f"window {last['window']}: MSE {last['mse']}, diverged systems {last['n_diverged']}")
    elif protocol == "equivariance":
        n = min(len(ts), ev["n_systems"])
        res = equivariance_audit(
            model, ts.positions[:n, 0], ts.velocities[:n, 0], ts.attributes[:n], ev["transforms"], cfg["seed"]
        )
        res["threshold"] = ev["threshold"]
        report.equivariance = res
        print(f"max relative deviation {res['max_deviation']:.3e} over {res['n_transforms']} transforms")
        if res["max_deviation"] > ev["threshold"]:
            report.flags.append("equivariance deviation above threshold")
            status = EXIT_CHECK
    else:  # argparse restricts the choices
        raise UsageError(f"unknown eval protocol {protocol!r}")
    _finish_report(report, out)
    return status


def cmd_export_traj(cfg: dict, out_file: str | None) -> int:
    ev = cfg["evaluation"]
    model, _ = load_model(_require(cfg, "checkpoint"))
    if not isinstance(model, PingoModel):
        raise UsageError("export-traj needs a PINGO checkpoint; direct-mapping models have no integrator path")
    ts = load_dataset(_require(cfg, "data"))[ev["split"]]
    path = Path(out_file) if out_file else Path(cfg["output_dir"]) / "trajectory.csv"
    mode = "w"
    for i in ev["indices"]:
        if not 0 <= i < len(ts):
            raise UsageError(f"trajectory index {i} out of range for a split of {len(ts)}")
        result = rollout(ts.state(i), model, ev["windows"], keep_paths=True)
        write_path_csv(path, result.paths, mode=mode)
        mode = "a"
        if result.diverged:
            log.warning("trajectory %d diverged in window %d", i, result.diverged_at)
    _echo_config(cfg, path.parent, "export-traj")
    print(f"wrote {path}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--seed", type=int, help="global seed (default 0)")
    p.add_argument("--out", help=f"output directory (default 'runs'; env {OUTPUT_ENV} also sets it)")


def _add_generation(p: argparse.ArgumentParser) -> None:
    p.add_argument("--system", choices=SYSTEM_KINDS, help="system kind")
    p.add_argument("--n-bodies", type=int, help="particles per system")
    p.add_argument("--n-train", type=int, help="training trajectories")
    p.add_argument("--n-valid", type=int, help="validation trajectories")
    p.add_argument("--n-test", type=int, help="test trajectories")
    p.add_argument("--steps", type=int, help="integration steps per trajectory")
    p.add_argument("--dt", type=float, help="ground-truth step size")
    p.add_argument("--sample-every", type=int, help="store every k-th step")
    p.add_argument("--softening", type=float, help="softening length (default per system)")
    p.add_argument("--strength", type=float, help="interaction strength")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", choices=("pingo", "direct"), help="PINGO or the direct-mapping EGNN baseline")
    p.add_argument("--layers", type=int, help="EGNN depth")
    p.add_argument("--hidden", type=int, help="hidden width")
    p.add_argument("--accel-range", type=float, help="bound on each edge's acceleration coefficient")
    p.add_argument("--no-accel-range", action="store_true", help="leave edge coefficients unbounded")
    p.add_argument("--no-normalize-diff", action="store_true", help="use raw coordinate differences")
    p.add_argument("--tau", type=int, help="integrator steps per horizon")
    p.add_argument("--horizon", type=float, help="prediction horizon T in time units")
    p.add_argument("--variant", type=_variant, help="second-order or first-order")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--batch-size", type=int, help="mini-batch size")
    p.add_argument("--epochs", type=int, help="maximum epochs")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--weight-decay", type=float, help="L2 weight decay")
    p.add_argument("--patience", type=int, help="early-stopping patience in epochs")


def _add_eval_inputs(p: argparse.ArgumentParser, checkpoint: bool = True) -> None:
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", choices=("train", "valid", "test"), help="dataset split (default test)")
    if checkpoint:
        p.add_argument("--checkpoint", help="model checkpoint")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pingo", description="PINGO: learned accelerations with symplectic integration.")
    parser.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all available cores)")
    parser.add_argument("--log-level", default="WARNING", help="logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a dataset directory")
    _add_common(p)
    _add_generation(p)

    p = sub.add_parser("train", help="train PINGO or the baseline")
    _add_common(p)
    _add_model(p)
    _add_training(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--resume", help="continue from a last.ckpt training checkpoint")

    p = sub.add_parser("eval", help="run an evaluation protocol")
    esub = p.add_subparsers(dest="protocol", required=True)

    e = esub.add_parser("direct", help="MSE at one or more horizons")
    _add_common(e)
    _add_eval_inputs(e)
    e.add_argument("--horizons", type=_csv_floats, help="comma-separated horizons")
    e.add_argument("--horizon", type=float, help="training horizon T")

    e = esub.add_parser("intermediate", help="MSE at fractions of the horizon")
    _add_common(e)
    _add_eval_inputs(e)
    e.add_argument("--fractions", type=_csv_fractions, help="comma-separated fractions, e.g. 1/4,1/2")
    e.add_argument("--horizon", type=float, help="training horizon T")

    e = esub.add_parser("rollout", help="closed-loop rollout curve")
    _add_common(e)
    _add_eval_inputs(e)
    e.add_argument("--windows", type=int, help="number of rollout windows")
    e.add_argument("--horizon", type=float, help="window length T")

    e = esub.add_parser("numerical", help="symplectic Euler with the true force at coarse steps")
    _add_common(e)
    _add_eval_inputs(e, checkpoint=False)
    e.add_argument("--dts", type=_csv_floats, help="comma-separated step sizes")
    e.add_argument("--windows", type=int, help="number of windows")
    e.add_argument("--horizon", type=float, help="window length T")

    e = esub.add_parser("tau-scan", help="train and test one model per tau and seed")
    _add_common(e)
    _add_eval_inputs(e, checkpoint=False)
    _add_model(e)
    _add_training(e)
    e.add_argument("--taus", type=_csv_ints, help="comma-separated tau values")
    e.add_argument("--seeds", type=_csv_ints, help="comma-separated seeds")

    e = esub.add_parser("equivariance", help="O(3) x translation audit; exits 1 above --threshold")
    _add_common(e)
    _add_eval_inputs(e)
    e.add_argument("--transforms", type=int, help="number of random transforms")
    e.add_argument("--threshold", type=float, help="maximum allowed relative deviation")
    e.add_argument("--n-systems", type=int, help="test systems to transform")

    e = esub.add_parser("truncation", help="local/global error orders of symplectic Euler")
    _add_common(e)
    _add_generation(e)
    e.add_argument("--dts", type=_csv_floats, help="comma-separated step sizes (at least 3)")
    e.add_argument("--n-systems", type=int, help="random systems to average over")
    e.add_argument("--horizon", type=float, help="global-error horizon")

    p = sub.add_parser("export-traj", help="write predicted integrator paths as CSV")
    _add_common(p)
    _add_eval_inputs(p)
    p.add_argument("--indices", type=_csv_ints, help="comma-separated trajectory indices")
    p.add_argument("--windows", type=int, help="rollout windows to export")
    p.add_argument("--file", help="CSV path (default <out>/trajectory.csv)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = effective_config(args)
        with threadpool_limits(limits=args.threads):
            if args.command == "gen":
                return cmd_gen(cfg)
            if args.command == "train":
                return cmd_train(cfg, args.resume)
            if args.command == "eval":
                return cmd_eval(cfg, args.protocol)
            return cmd_export_traj(cfg, args.file)
    except UsageError as exc:
        print(f"pingo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as exc:
        print(f"pingo: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"pingo: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError) as exc:
        print(f"pingo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
