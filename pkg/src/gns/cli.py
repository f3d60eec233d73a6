"""Command-line pipeline: data generation, training, rollout, evaluation,
ablation sweeps, and plotting.

Every command echoes its fully resolved configuration into the output
directory; re-running with the same seed reproduces outputs byte-for-byte
(datasets, rollouts) or log-for-log (training).

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from gns import __version__, backend
from gns import datagen as dg
from gns import metrics as mt
from gns import svg
from gns import train as tr
from gns.errors import (ConfigError, DataError, DimensionError, FormatError,
                        GenerationError, GnsError, RolloutError,
                        ScatterIndexError, TrainingError)
from gns.model import GnsConfig
from gns.rollout import rollout, teacher_forced_positions, window_state

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

CONFIG_SECTIONS = ("scenario", "model", "train", "metrics")

ABLATION_AXES = {
    "M": ("model", "message_passing_steps", int),
    "radius": ("model", "connectivity_radius", float),
    "noise": ("train", "noise.sigma_v", float),
    "shared": ("model", "shared_processor_params", lambda s: s.lower() in ("1", "true")),
    "encoder": ("model", "encoder_variant", str),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        data = json.load(fh)
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return data


def _echo_config(out_dir, resolved: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)


def _scenario_from(name: str, overrides: dict) -> dg.Scenario:
    base = dg.springs_scenario() if name == dg.SPRINGS else dg.Scenario(name=name)
    merged = base.to_dict()
    merged.update(overrides)
    merged["name"] = name
    return dg.Scenario.from_dict(merged)


def _model_config(section: dict | None, dataset: dg.TrajectoryDataset) -> GnsConfig:
    """Desk-width preset by default; an explicit section overrides it.

    The connectivity radius falls back to the dataset default either way.
    """
    section = dict(section or {})
    section.setdefault("connectivity_radius", dataset.connectivity_radius)
    if set(section) == {"connectivity_radius"}:
        return tr.desk_model_config(section["connectivity_radius"])
    defaults = dataclasses.asdict(tr.desk_model_config(section["connectivity_radius"]))
    defaults.update(section)
    return GnsConfig.from_dict(defaults)


def cmd_gen(args) -> int:
    file_cfg = _load_config_file(args.config)
    overrides = dict(file_cfg.get("scenario", {}))
    if args.steps:
        overrides["steps"] = args.steps
    scenario = _scenario_from(args.scenario, overrides)
    n_train, n_valid, n_test = args.splits
    dg.make_dataset(scenario, args.out, n_train, n_valid, n_test, seed=args.seed)
    _echo_config(args.out, {
        "command": "gen",
        "scenario": scenario.to_dict(),
        "splits": {"train": n_train, "valid": n_valid, "test": n_test},
        "seed": args.seed,
    })
    total = n_train + n_valid + n_test
    print(f"wrote {total} trajectories to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    dataset = dg.TrajectoryDataset(args.dataset)
    train_section = dict(file_cfg.get("train", {}))
    if args.max_steps is not None:
        train_section["max_steps"] = args.max_steps
    if args.seed is not None:
        train_section["seed"] = args.seed
    cfg = tr.TrainConfig.from_dict(train_section)
    model_cfg = _model_config(file_cfg.get("model"), dataset)
    _echo_config(args.out, {
        "command": "train",
        "dataset": str(args.dataset),
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(cfg),
    })
    result = tr.fit(dataset, cfg, model_cfg, out_dir=args.out)
    print(f"trained {cfg.max_steps} steps; best validation rollout MSE "
          f"{result.best_val_mse:.6e}")
    print(f"best checkpoint: {result.best_path}")
    return EXIT_OK


def cmd_rollout(args) -> int:
    model, stats, _ = tr.load_model(args.checkpoint)
    dataset = dg.TrajectoryDataset(args.dataset)
    rels = dataset.split(args.split)
    if not 0 <= args.traj_index < len(rels):
        raise DataError(f"trajectory index {args.traj_index} outside split "
                        f"'{args.split}' of size {len(rels)}")
    traj = dataset.load(rels[args.traj_index])
    c = model.cfg.velocity_history
    steps = args.steps or traj.num_steps - c - 1
    initial = window_state(traj, c, c)
    result = rollout(model, stats, initial, steps, metadata={
        "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset),
        "split": args.split,
        "traj_index": args.traj_index,
    })
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = f"rollout_{args.split}_{args.traj_index:04d}"
    out_traj = dg.Trajectory(
        positions=result.full_positions,
        materials=traj.materials,
        globals_per_step=np.repeat(traj.globals_per_step[:1], steps + c + 1, axis=0),
        dt=traj.dt, box_lo=traj.box_lo, box_hi=traj.box_hi,
        scenario=traj.scenario)
    dg.write_trajectory(out_dir / f"{name}.traj", out_traj)
    sidecar = dict(result.metadata)
    sidecar.update({
        "steps": steps,
        "mean_step_seconds": float(np.mean(result.step_seconds)),
        "backend": backend.name(),
    })
    with open(out_dir / f"{name}.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    _echo_config(out_dir, {
        "command": "rollout", "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset), "split": args.split,
        "traj_index": args.traj_index, "steps": steps,
    })
    print(f"wrote {out_dir / name}.traj ({steps} predicted steps)")
    return EXIT_OK


def _evaluate_model(model, stats, dataset, split, which, limit,
                    mmd_sigma=mt.DEFAULT_MMD_BANDWIDTH):
    """Per-trajectory one-step and rollout reports against ground truth."""
    c = model.cfg.velocity_history
    one_step, rolled = [], []
    rels = dataset.split(split)[:limit] if limit else dataset.split(split)
    for rel in rels:
        traj = dataset.load(rel)
        truth = traj.positions[c + 1:]
        preds = teacher_forced_positions(model, stats, traj, c)
        one_step.append(mt.evaluate(preds, truth, which=which,
                                    materials=traj.materials,
                                    mmd_sigma=mmd_sigma, kind="one_step"))
        try:
            result = rollout(model, stats, window_state(traj, c, c), truth.shape[0])
            rolled.append(mt.evaluate(result.predicted, truth, which=which,
                                      materials=traj.materials,
                                      mmd_sigma=mmd_sigma, kind="rollout"))
        except RolloutError:
            blown = mt.MetricReport(kind="rollout",
                                    values={m: float("inf") for m in which})
            blown.meta["blew_up"] = True
            rolled.append(blown)
    return one_step, rolled


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    metric_opts = dict(file_cfg.get("metrics", {}))
    unknown = set(metric_opts) - {"mmd_sigma"}
    if unknown:
        raise ConfigError(f"unknown metrics config keys: {sorted(unknown)}")
    mmd_sigma = metric_opts.get("mmd_sigma", mt.DEFAULT_MMD_BANDWIDTH)
    which = tuple(args.metrics.split(","))
    bad = set(which) - {"mse", "ot", "mmd"}
    if bad:
        raise ConfigError(f"unknown metrics: {sorted(bad)}")

    model, stats, _ = tr.load_model(args.checkpoint)
    dataset = dg.TrajectoryDataset(args.dataset)
    one_step, rolled = _evaluate_model(model, stats, dataset, args.split,
                                       which, args.limit, mmd_sigma)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {
        "one_step": {
            "per_trajectory": [r.to_dict() for r in one_step],
            "aggregate": mt.aggregate_reports(one_step).to_dict(),
        },
        "rollout": {
            "per_trajectory": [r.to_dict() for r in rolled],
            "aggregate": mt.aggregate_reports(rolled).to_dict(),
        },
        "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset),
        "split": args.split,
    }
    with open(out_dir / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for i, rep in enumerate(rolled):
        if rep.curves:
            (out_dir / f"rollout_curves_{i:04d}.csv").write_text(rep.curves_csv())
    _echo_config(out_dir, {
        "command": "eval", "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset), "split": args.split,
        "metrics": list(which), "limit": args.limit,
        "mmd_sigma": mmd_sigma,
    })
    agg = report["rollout"]["aggregate"]["values"]
    agg1 = report["one_step"]["aggregate"]["values"]
    print(f"one-step: {agg1}")
    print(f"rollout:  {agg}")
    return EXIT_OK


def _ablate_run(packed):
    """One (value, seed) training + evaluation; module-level for pickling."""
    (dataset_path, axis, raw_value, seed, budget, out_dir, model_section) = packed
    dataset = dg.TrajectoryDataset(dataset_path)
    section, key, parse = ABLATION_AXES[axis]
    value = parse(raw_value)

    model_section = dict(model_section or {})
    train_section = {"max_steps": budget, "seed": seed,
                     "eval_every": max(budget // 2, 1)}
    if section == "model":
        model_section[key] = value
    else:
        train_section["noise"] = {"sigma_v": value}
    model_cfg = _model_config(model_section, dataset)
    cfg = tr.TrainConfig.from_dict(train_section)

    run_dir = Path(out_dir) / f"{axis}_{raw_value}_seed{seed}"
    result = tr.fit(dataset, cfg, model_cfg, out_dir=run_dir)
    model, stats, _ = tr.load_model(result.best_path)
    one_step, rolled = _evaluate_model(model, stats, dataset, "test",
                                       ("mse",), limit=3)
    return {
        "value": raw_value, "seed": seed,
        "one_step_mse": mt.aggregate_reports(one_step).values["mse"],
        "rollout_mse": mt.aggregate_reports(rolled).values["mse"],
    }


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args.config)
    if args.axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis '{args.axis}' "
                          f"(choose from {sorted(ABLATION_AXES)})")
    values = args.values.split(",")
    seeds = list(range(args.seeds))
    jobs = [(str(args.dataset), args.axis, v, s, args.budget, str(args.out),
             file_cfg.get("model", {}))
            for v in values for s in seeds]
    if args.parallel > 1:
        import multiprocessing as mp
        with mp.get_context("spawn").Pool(args.parallel) as pool:
            results = pool.map(_ablate_run, jobs)
    else:
        results = [_ablate_run(job) for job in jobs]

    rows = []
    for v in values:
        mine = [r for r in results if r["value"] == v]
        rows.append({
            "value": v,
            "one_step_mse": float(np.median([r["one_step_mse"] for r in mine])),
            "rollout_mse": float(np.median([r["rollout_mse"] for r in mine])),
        })
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.json", "w") as fh:
        json.dump({"axis": args.axis, "budget": args.budget, "seeds": args.seeds,
                   "rows": rows, "runs": results}, fh, indent=2, sort_keys=True)
    lines = ["value,one_step_mse,rollout_mse"]
    for row in rows:
        lines.append(f"{row['value']},{row['one_step_mse']!r},{row['rollout_mse']!r}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n")
    _echo_config(out_dir, {
        "command": "ablate", "dataset": str(args.dataset), "axis": args.axis,
        "values": values, "budget": args.budget, "seeds": args.seeds,
    })
    for row in rows:
        print(f"{args.axis}={row['value']}: one-step {row['one_step_mse']:.3e} "
              f"rollout {row['rollout_mse']:.3e}")
    return EXIT_OK


def _read_csv(path):
    lines = Path(path).read_text().strip().splitlines()
    if not lines:
        raise FormatError(f"empty csv {path}")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]
    return header, rows


def cmd_plot(args) -> int:
    header, rows = _read_csv(args.input)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix == ".csv":
        out.write_text(",".join(header) + "\n" +
                       "\n".join(",".join(r) for r in rows) + "\n")
        print(f"wrote {out}")
        return EXIT_OK
    if header[0] == "timestep":
        series = {}
        for col in range(1, len(header)):
            xs, ys = [], []
            for row in rows:
                if col < len(row) and row[col]:
                    xs.append(float(row[0]))
                    ys.append(float(row[col]))
            series[header[col]] = (xs, ys)
        doc = svg.line_chart(series, title=Path(args.input).stem,
                             xlabel="timestep", ylabel="metric")
    else:
        labels = [row[0] for row in rows]
        series = {header[c]: [float(row[c]) if row[c] else float("nan")
                              for row in rows]
                  for c in range(1, len(header))}
        doc = svg.bar_chart(labels, series, title=Path(args.input).stem,
                            xlabel=header[0], ylabel="MSE")
    out.write_text(doc)
    print(f"wrote {out}")
    return EXIT_OK


def _build_parser() -> _Parser:
    parser = _Parser(prog="gns", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="generate a toy dataset")
    p.add_argument("--scenario", default=dg.GRAVITY_BOUNCE, choices=dg.SCENARIO_NAMES)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", default="50,5,5",
                   type=lambda s: tuple(int(x) for x in s.split(",")))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a simulator on a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="roll a trained model forward")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--traj-index", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="one-step and rollout metrics on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--metrics", default="mse,ot,mmd")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one architecture/training axis")
    p.add_argument("--dataset", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--budget", type=int, default=3000)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render report CSV as SVG")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, RolloutError, GenerationError, DimensionError,
            ScatterIndexError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GnsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
