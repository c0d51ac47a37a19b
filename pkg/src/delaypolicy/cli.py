"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Global flags (``--seed``, ``--out``, ``--config``, ``--print-config``) may be
given before or after the subcommand.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

from . import envs, exec_sim, experiments
from .compress import build_delay_dataset
from .diffusion.checkpoint import load_model, save_model
from .diffusion.model import DiffusionModel, train
from .errors import DataError, DelayPolicyError, NumericalError
from .plotting import SWEEP_COLUMNS, plot_csv, save_figure, success_figure, write_csv
from .trajectory import Dataset, compute_normalization, dataset_path, delta_tag, dp_execution_time, load_dataset, save_dataset

log = logging.getLogger("delaypolicy")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _seed_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seeds must be comma separated integers, got {text!r}") from exc


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    kw = {"argument_default": argparse.SUPPRESS} if suppress else {}
    p = argparse.ArgumentParser(add_help=False, **kw)
    p.add_argument("--seed", type=int, help="master seed (data generation, training, sampling)")
    p.add_argument("-o", "--out", help="output file or directory")
    p.add_argument("--config", help="experiment config file ([task], [train], [experiment] sections)")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="delaypolicy", description=__doc__.splitlines()[0], parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = [_global_flags(True)]

    p = sub.add_parser("gen-data", parents=common, help="generate zero-delay expert demonstrations")
    p.add_argument("--task", choices=envs.TASKS)
    p.add_argument("--task-config", help="key = value task file")
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("compress", parents=common, help="compress datasets for one or more delays")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--delta", type=float, action="append", required=True, help="delay in seconds (repeatable)")
    p.add_argument("--h-act", type=int)
    p.add_argument("--smooth", action="store_true")
    p.add_argument("--max-step", type=float, help="reject compressed steps longer than this")
    p.add_argument("--literal-obs", action="store_true", help="do not store pre-delay observations")

    p = sub.add_parser("train", parents=common, help="train a diffusion policy")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--method", choices=("DA-DP", "DP"), default="DA-DP")

    for name, helptext in (("eval", "evaluate one model"), ("sweep", "evaluate several models and plot")):
        p = sub.add_parser(name, parents=common, help=helptext)
        p.add_argument("--model", action="append", required=True, help="checkpoint path, or 'expert'")
        p.add_argument("--task", choices=envs.TASKS)
        p.add_argument("--delta", type=float, nargs="+", required=True)
        p.add_argument("--episodes", type=int)
        p.add_argument("--seeds", type=_seed_list)
        p.add_argument("--delta-source", choices=("fixed", "measured"), default="fixed")

    for name in ("q1", "q2", "q3"):
        sub.add_parser(name, parents=common, help=f"run the {name} delay study")

    p = sub.add_parser("plot", parents=common, help="render sweep CSVs as charts")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--kind", choices=("bar", "line"), default="bar")
    p.add_argument("--format", choices=("svg", "png"), default="svg")

    p = sub.add_parser("measure-delay", parents=common, help="median wall-clock inference time of a model")
    p.add_argument("--model", required=True)
    p.add_argument("--task", choices=envs.TASKS)
    p.add_argument("--repetitions", type=int, default=10)
    return parser


# --- helpers ------------------------------------------------------------------


def _config(args) -> experiments.ExperimentConfig:
    cfg = experiments.load_config(args.config) if getattr(args, "config", None) else experiments.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _task(args, cfg) -> envs.TaskSpec:
    spec = cfg.task
    if getattr(args, "task_config", None):
        spec = envs.load_task_spec(args.task_config)
    task = getattr(args, "task", None)
    if task and task != spec.task:
        spec = replace(spec, task=task)
    return spec


def _emit_csv(rows, columns, out=None):
    w = csv.writer(out or sys.stdout, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])


def merge_datasets(datasets) -> Dataset:
    """Pool several datasets, keeping their labels and stored observations, with fresh normalization."""
    trajs, deltas, obs = [], [], []
    for ds in datasets:
        trajs += ds.trajectories
        deltas += ds.deltas
        obs += [ds.observations[i] if ds.observations else None for i in range(len(ds))]
    if not trajs:
        raise DataError("no trajectories in the given datasets")
    dims = {(t.state_dim, t.action_dim) for t in trajs}
    if len(dims) > 1:
        raise DataError(f"datasets disagree on dimensions: {sorted(dims)}")
    return Dataset(tuple(trajs), tuple(deltas), compute_normalization(trajs), observations=tuple(obs))


def _policy(spec_model: str, cfg, seed: int, spec: envs.TaskSpec):
    """``(name, policy, timing)`` for a checkpoint path or the literal ``expert``."""
    if spec_model == "expert":
        timing = spec.timing(0.0, cfg.experiment.h_act, cfg.experiment.h_obs)
        return "expert", exec_sim.ExpertPolicy(timing.h_act), timing
    model = load_model(spec_model)
    if model.dims.state_dim != spec.state_dim or model.dims.action_dim != spec.action_dim:
        raise DataError(
            f"{spec_model}: model dims ({model.dims.state_dim}, {model.dims.action_dim}) "
            f"do not match task {spec.task} ({spec.state_dim}, {spec.action_dim})"
        )
    timing = spec.timing(0.0, model.dims.h_act, model.dims.h_obs)
    return model.method, exec_sim.DiffusionPolicy(model, seed=seed), timing


# --- commands -----------------------------------------------------------------


def cmd_gen_data(args, cfg) -> int:
    spec = _task(args, cfg)
    seed = cfg.experiment.seed
    episodes = args.episodes if getattr(args, "episodes", None) is not None else cfg.experiment.demos
    demos = envs.generate_demos(spec, episodes, seed)
    if not demos.trajectories:
        raise DataError("every demonstration was infeasible")
    path = dataset_path(getattr(args, "out", None) or "data", spec.task, 0.0, seed)
    save_dataset(Dataset.from_trajectories(demos.trajectories), path)
    for episode, reason in demos.infeasible:
        print(f"excluded episode {episode}: {reason}", file=sys.stderr)
    print(f"path={path}")
    print(f"demos={len(demos.trajectories)} infeasible={len(demos.infeasible)} infeasible_rate={demos.infeasible_rate!r}")
    return EXIT_OK


def cmd_compress(args, cfg) -> int:
    out_root = Path(getattr(args, "out", None) or "data")
    h_act = args.h_act or cfg.experiment.h_act
    rows = []
    for src in args.inputs:
        ds = load_dataset(src)
        task = ds.trajectories[0].meta.task or cfg.task.task
        timing = replace(cfg.timing, dt=ds.trajectories[0].dt, h_act=h_act)
        for delta in args.delta:
            built = build_delay_dataset(
                ds.trajectories, [delta], timing, args.smooth, args.max_step, pre_delay_obs=not args.literal_obs
            )
            dest = out_root / task / delta_tag(delta) / Path(src).name
            save_dataset(built.dataset, dest)
            groups = Counter((r["source_len"], r["length"], tuple(r["skip_schedule"])) for r in built.records)
            for (n, length, sched), count in sorted(groups.items()):
                rows.append(
                    {
                        "file": str(src),
                        "delta": float(delta),
                        "source_len": n,
                        "length": length,
                        "skip_schedule": " ".join(map(str, sched)),
                        "duration": dp_execution_time(length, timing.with_delta(delta)),
                        "target": n * timing.dt,
                        "trajectories": count,
                        "output": str(dest),
                    }
                )
            for f in built.failures:
                print(f"{src}: trajectory {f.index} at delta={f.delta!r}: {f.reason}", file=sys.stderr)
    cols = ("file", "delta", "source_len", "length", "skip_schedule", "duration", "target", "trajectories", "output")
    _emit_csv(rows, cols)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    ds = merge_datasets([load_dataset(p) for p in args.data])
    tcfg = replace(cfg.train, delta_conditioned=args.method == "DA-DP")
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    timing = replace(cfg.timing, dt=ds.trajectories[0].dt)
    model = train(ds, tcfg, timing, cfg.experiment.seed, method=args.method)
    out = Path(getattr(args, "out", None) or "model.ckpt")
    save_model(model, out)
    final = float(model.losses[-1]) if len(model.losses) else float("nan")
    print(f"path={out}")
    print(f"method={model.method} steps={tcfg.steps} final_loss={final!r} delta_max={model.delta_max!r}")
    return EXIT_OK


def _evaluate(args, cfg):
    spec = _task(args, cfg)
    episodes = args.episodes if args.episodes is not None else cfg.experiment.episodes
    seeds = args.seeds if args.seeds is not None else cfg.seeds
    mode = exec_sim.ExecMode(delta_source=args.delta_source)
    rows, seen = [], Counter()
    for path in args.model:
        name, policy, timing = _policy(path, cfg, cfg.experiment.seed, spec)
        seen[name] += 1
        label = name if seen[name] == 1 else f"{name}#{seen[name]}"
        for r in exec_sim.sweep({label: policy}, spec, timing, args.delta, episodes, seeds, mode):
            if r.failures:
                print(f"{label} delta={r.delta!r}: {r.failures} episode(s) raised errors", file=sys.stderr)
            rows.append(r.as_dict())
    return rows


def cmd_eval(args, cfg) -> int:
    rows = _evaluate(args, cfg)
    out = getattr(args, "out", None)
    if out:
        write_csv(rows, out)
    _emit_csv(rows, SWEEP_COLUMNS)
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    rows = _evaluate(args, cfg)
    out = Path(getattr(args, "out", None) or "sweep")
    csv_path = write_csv(rows, out / "sweep.csv")
    fig = save_figure(success_figure(rows, "bar", "success vs delay"), out / f"sweep.{cfg.experiment.figure_format}")
    _emit_csv(rows, SWEEP_COLUMNS)
    print(f"csv={csv_path} figure={fig}", file=sys.stderr)
    return EXIT_OK


def cmd_study(args, cfg) -> int:
    out = Path(getattr(args, "out", None) or "results")
    fn = {"q1": experiments.cmd_q1, "q2": experiments.cmd_q2, "q3": experiments.cmd_q3}[args.command]
    report = fn(cfg, out)
    _emit_csv(report.rows, SWEEP_COLUMNS)
    for key, value in report.pooled.items():
        print(f"pooled {key}: {value:.3f}", file=sys.stderr)
    for f in report.failures:
        print(f"failure: {f}", file=sys.stderr)
    print(f"csv={report.csv_path} figure={report.figure_path} manifest={report.manifest_path}", file=sys.stderr)
    return EXIT_OK


def cmd_plot(args, cfg) -> int:
    out = getattr(args, "out", None)
    for src in args.csvs:
        dest = Path(out) / Path(src).with_suffix(f".{args.format}").name if out else Path(src).with_suffix(f".{args.format}")
        print(plot_csv(src, dest, kind=args.kind))
    return EXIT_OK


def cmd_measure_delay(args, cfg) -> int:
    if args.repetitions < 1:
        raise UsageError("--repetitions must be >= 1")
    spec = _task(args, cfg)
    model: DiffusionModel = load_model(args.model)
    policy = exec_sim.DiffusionPolicy(model, seed=cfg.experiment.seed)
    probe = exec_sim.observation_window([envs.reset(spec, cfg.experiment.seed).vector()], model.dims.h_obs)
    if probe.shape[1] != model.dims.state_dim:
        raise DataError(f"model expects state dim {model.dims.state_dim}, task {spec.task} has {probe.shape[1]}")
    seconds = exec_sim.measure_delay(policy, probe, args.repetitions)
    steps = seconds / spec.dt
    print(f"median_seconds={seconds!r} control_steps={steps:.3f} repetitions={args.repetitions}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "compress": cmd_compress,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "q1": cmd_study,
    "q2": cmd_study,
    "q3": cmd_study,
    "plot": cmd_plot,
    "measure-delay": cmd_measure_delay,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if getattr(args, "print_config", False):
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        if not args.command:
            parser.print_usage(sys.stderr)
            print("delaypolicy: error: a command is required", file=sys.stderr)
            return EXIT_USAGE
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DelayPolicyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
