"""Experiment orchestration: configs, model caching and the three delay studies.

``q1``
    One delay per run: DP (zero-delay data, no delay input) against a DA-DP
    trained on the demos compressed for that delay.
``q2``
    One DA-DP trained jointly on a set of delays, against the same DP.
``q3``
    The ``q2`` models evaluated on the set shifted by a constant, without
    retraining.

Every run writes a CSV in the sweep schema, a chart next to it and a JSON
manifest recording the compressed lengths, skip schedules and delay labels
behind each result.  Trained models are cached under ``<out>/models`` keyed by
a digest of everything that affects training, so DP is trained once per
configuration and ``q3`` reuses the ``q2`` checkpoints.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from . import envs, exec_sim
from .compress import build_delay_dataset
from .config import dataclass_lines, update_dataclass
from .diffusion.checkpoint import load_model, save_model
from .diffusion.model import DiffusionModel, TrainConfig, train
from .errors import DataError, DelayPolicyError
from .plotting import save_figure, success_figure, write_csv
from .trajectory import TimingConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentSettings:
    """The ``[experiment]`` section."""

    demos: int = 100
    seed: int = 0
    q1_deltas: tuple[float, ...] = (0.0, 0.05, 0.1, 0.2)
    q2_deltas: tuple[float, ...] = (0.0, 0.05, 0.1)
    q3_shift: float = 0.15
    episodes: int = 100
    eval_seeds: tuple[int, ...] = (0, 1, 2)
    h_act: int = 8
    h_obs: int = 2
    smooth: bool = False
    pre_delay_obs: bool = True
    figure_format: str = "svg"


@dataclass(frozen=True)
class ExperimentConfig:
    task: envs.TaskSpec = field(default_factory=envs.TaskSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentSettings = field(default_factory=ExperimentSettings)

    @property
    def timing(self) -> TimingConfig:
        return self.task.timing(0.0, self.experiment.h_act, self.experiment.h_obs)

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.experiment.eval_seeds]

    def to_text(self) -> str:
        parts = []
        for name in ("task", "train", "experiment"):
            skip = ("delta_conditioned",) if name == "train" else ()
            parts.append(f"[{name}]\n" + "\n".join(dataclass_lines(getattr(self, name), skip)) + "\n")
        return "\n".join(parts)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, experiment=replace(self.experiment, seed=int(seed)))


def load_config(path=None, text: str | None = None) -> ExperimentConfig:
    """Parse an INI-style config; missing sections and keys keep their defaults."""
    cfg = ExperimentConfig()
    if path is None and text is None:
        return cfg
    parser = configparser.ConfigParser()
    try:
        if text is not None:
            parser.read_string(text)
        else:
            with open(path) as fh:
                parser.read_file(fh)
    except configparser.Error as exc:
        raise DataError(f"bad config: {exc}") from exc
    unknown = sorted(set(parser.sections()) - {"task", "train", "experiment"})
    if unknown:
        raise DataError(f"unknown config sections: {unknown}")
    task = cfg.task
    if parser.has_section("task"):
        values = dict(parser["task"])
        task = envs.spec_from_mapping(values, envs.TaskSpec(task=values.get("task", task.task)))
    tcfg = update_dataclass(cfg.train, dict(parser["train"]), "train") if parser.has_section("train") else cfg.train
    if "delta_conditioned" in (parser["train"] if parser.has_section("train") else {}):
        raise DataError("[train] delta_conditioned is set per method, not in the config")
    exp = cfg.experiment
    if parser.has_section("experiment"):
        exp = update_dataclass(exp, dict(parser["experiment"]), "experiment")
    out = ExperimentConfig(task, tcfg, exp)
    _check(out)
    return out


def _check(cfg: ExperimentConfig) -> None:
    e = cfg.experiment
    if e.demos < 1 or e.episodes < 1:
        raise DataError("demos and episodes must be positive")
    if not e.eval_seeds:
        raise DataError("at least one evaluation seed is required")
    if any(d < 0 for d in e.q1_deltas + e.q2_deltas):
        raise DataError("delays must be non-negative")
    if e.figure_format not in ("svg", "png"):
        raise DataError(f"figure_format must be svg or png, got {e.figure_format!r}")
    cfg.timing  # validates horizons


# --- shared stages ------------------------------------------------------------


@dataclass
class Report:
    name: str
    rows: list[dict]
    csv_path: Path
    figure_path: Path | None
    manifest_path: Path
    failures: list[dict]
    pooled: dict[str, float] = field(default_factory=dict)


class Workspace:
    """Demos and trained models for one configuration, cached on disk under ``out``."""

    def __init__(self, cfg: ExperimentConfig, out):
        self.cfg = cfg
        self.out = Path(out)
        self._demos: envs.DemoSet | None = None

    @property
    def demos(self) -> envs.DemoSet:
        if self._demos is None:
            e = self.cfg.experiment
            self._demos = envs.generate_demos(self.cfg.task, e.demos, e.seed)
            if not self._demos.trajectories:
                raise DataError("every demonstration was infeasible")
        return self._demos

    def _digest(self, tag: str, deltas: Sequence[float]) -> str:
        e = self.cfg.experiment
        key = "\n".join(
            [
                tag,
                envs.spec_to_text(self.cfg.task),
                *dataclass_lines(self.cfg.train, skip=("log_every",)),
                f"demos={e.demos} seed={e.seed} h_act={e.h_act} h_obs={e.h_obs}",
                f"smooth={e.smooth} pre_delay_obs={e.pre_delay_obs}",
                "deltas=" + ",".join(repr(float(d)) for d in deltas),
            ]
        )
        return hashlib.sha256(key.encode()).hexdigest()[:12]

    def model_path(self, tag: str, deltas: Sequence[float]) -> Path:
        return self.out / "models" / f"{tag}-{self._digest(tag, deltas)}.ckpt"

    def dataset(self, deltas: Sequence[float]):
        """``(dataset, records, failures)`` for the demos compressed at every delay in ``deltas``."""
        e = self.cfg.experiment
        built = build_delay_dataset(
            self.demos.trajectories,
            deltas,
            self.cfg.timing,
            smooth=e.smooth,
            max_step=self.cfg.task.max_step,
            pre_delay_obs=e.pre_delay_obs,
        )
        failures = [
            {"index": f.index, "episode": f.meta.episode, "delta": f.delta, "reason": f.reason} for f in built.failures
        ]
        return built.dataset, list(built.records), failures

    def model(self, tag: str, deltas: Sequence[float], delta_conditioned: bool, method: str) -> DiffusionModel:
        path = self.model_path(tag, deltas)
        if path.exists():
            log.info("reusing %s", path)
            return load_model(path)
        ds, _, _ = self.dataset(deltas)
        tcfg = replace(self.cfg.train, delta_conditioned=delta_conditioned)
        log.info("training %s on delays %s (%d trajectories)", method, list(deltas), len(ds))
        model = train(ds, tcfg, self.cfg.timing, self.cfg.experiment.seed, method=method)
        save_model(model, path)
        return model

    def dp(self) -> DiffusionModel:
        return self.model("dp", (0.0,), delta_conditioned=False, method="DP")

    def dadp(self, deltas: Sequence[float]) -> DiffusionModel:
        tag = "dadp-" + "_".join(f"{d * 1000:g}ms" for d in deltas)
        return self.model(tag, deltas, delta_conditioned=True, method="DA-DP")

    def evaluate(self, name: str, model: DiffusionModel, deltas: Sequence[float]) -> list[exec_sim.SweepRow]:
        policy = exec_sim.DiffusionPolicy(model, seed=self.cfg.experiment.seed)
        e = self.cfg.experiment
        return exec_sim.sweep({name: policy}, self.cfg.task, self.cfg.timing, deltas, e.episodes, self.cfg.seeds)


def pooled_rate(rows: Sequence[exec_sim.SweepRow]) -> float:
    total = sum(r.episodes for r in rows)
    return sum(r.success_rate * r.episodes for r in rows) / total if total else 0.0


def _summarize(records: Sequence[dict]) -> dict:
    by_delta: dict[str, Counter] = {}
    for r in records:
        key = repr(r["delta"])
        by_delta.setdefault(key, Counter())[
            f"n={r['source_len']} N'={r['length']} skips={r['skip_schedule']}"
        ] += 1
    return {k: dict(sorted(v.items())) for k, v in by_delta.items()}


def _finish(ws: Workspace, name: str, rows, manifest: dict, failures, title: str, kind: str, pooled=None) -> Report:
    out = ws.out
    dict_rows = [r.as_dict() for r in rows]
    csv_path = write_csv(dict_rows, out / f"{name}.csv")
    fig_path = None
    if dict_rows:
        fig_path = save_figure(success_figure(dict_rows, kind, title), out / f"{name}.{ws.cfg.experiment.figure_format}")
    manifest = {
        "experiment": name,
        "config": ws.cfg.to_text(),
        "infeasible_demos": [list(x) for x in ws.demos.infeasible],
        "infeasible_rate": ws.demos.infeasible_rate,
        "rows": dict_rows,
        "pooled": pooled or {},
        "failures": failures,
        **manifest,
    }
    manifest_path = out / f"{name}_manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return Report(name, dict_rows, csv_path, fig_path, manifest_path, failures, pooled or {})


# --- studies ------------------------------------------------------------------


def cmd_q1(cfg: ExperimentConfig, out) -> Report:
    """DP against a per-delay DA-DP at each delay of ``q1_deltas``.

    A failing delay cell is recorded in the manifest and the others continue.
    """
    ws = Workspace(cfg, out)
    deltas = [float(d) for d in cfg.experiment.q1_deltas]
    rows, failures, data = [], [], {}
    dp = ws.dp()
    rows += ws.evaluate("DP", dp, deltas)
    for delta in deltas:
        try:
            _, records, comp_failures = ws.dataset([delta])
            data[repr(delta)] = {"records": records, "summary": _summarize(records)}
            failures += comp_failures
            rows += ws.evaluate("DA-DP", ws.dadp([delta]), [delta])
        except DelayPolicyError as exc:
            log.warning("q1 cell delta=%s failed: %s", delta, exc)
            failures.append({"delta": delta, "stage": "DA-DP", "reason": str(exc)})
    rows.sort(key=lambda r: (r.method, r.delta))
    return _finish(ws, "q1", rows, {"datasets": data}, failures, "single-delay training", "line")


def _q2_models(ws: Workspace):
    deltas = [float(d) for d in ws.cfg.experiment.q2_deltas]
    if len(deltas) < 2:
        raise DataError("q2 needs a training set of at least two delays")
    return deltas, ws.dp(), ws.dadp(deltas)


def _set_study(ws: Workspace, name: str, train_deltas, eval_deltas, title: str) -> Report:
    _, records, comp_failures = ws.dataset(train_deltas)
    _, dp, dadp = _q2_models(ws)
    rows = ws.evaluate("DP", dp, eval_deltas) + ws.evaluate("DA-DP", dadp, eval_deltas)
    nonzero = [d for d in eval_deltas if d > 0]
    pooled = {}
    for method in ("DP", "DA-DP"):
        mine = [r for r in rows if r.method == method]
        pooled[method] = pooled_rate(mine)
        pooled[f"{method} (delta > 0)"] = pooled_rate([r for r in mine if r.delta in nonzero])
    manifest = {
        "train_deltas": list(train_deltas),
        "eval_deltas": list(eval_deltas),
        "datasets": {"records": records, "summary": _summarize(records)},
    }
    return _finish(ws, name, rows, manifest, comp_failures, title, "bar", pooled)


def cmd_q2(cfg: ExperimentConfig, out) -> Report:
    """One DA-DP trained jointly on ``q2_deltas``, evaluated on the same set, against DP."""
    ws = Workspace(cfg, out)
    deltas, _, _ = _q2_models(ws)
    return _set_study(ws, "q2", deltas, deltas, "multi-delay training")


def cmd_q3(cfg: ExperimentConfig, out) -> Report:
    """The ``q2`` models evaluated on ``q2_deltas + q3_shift`` without retraining.

    DA-DP is conditioned on the shifted delay it is actually run with.
    """
    ws = Workspace(cfg, out)
    deltas, _, _ = _q2_models(ws)
    shifted = [round(d + cfg.experiment.q3_shift, 12) for d in deltas]
    return _set_study(ws, "q3", deltas, shifted, "shifted delays")


def default_config_text() -> str:
    return ExperimentConfig().to_text()


__all__ = [
    "ExperimentConfig",
    "ExperimentSettings",
    "Report",
    "Workspace",
    "cmd_q1",
    "cmd_q2",
    "cmd_q3",
    "default_config_text",
    "load_config",
    "pooled_rate",
]
