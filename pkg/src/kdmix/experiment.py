"""Experiment configs, orchestration and the summary/compare reports."""

from __future__ import annotations

import configparser
import csv
import io
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import data as data_mod
from .data import Dataset
from .evaluate import ensemble_mask
from .nets import ConfigurationError, save_checkpoint
from .sharing import (
    CLASSIFICATION,
    CONFIGS,
    KD_ML,
    OFFLINE,
    S1,
    S2,
    STANDALONE,
    STRATEGIES,
    TASKS,
    SharingPlan,
    Weights,
    build_cohort,
    build_plan,
    build_standalone_plan,
    derive_weights,
)
from .train import (
    RunRecord,
    Splits,
    TrainSettings,
    predict,
    search_weights,
    summarize,
    train_offline,
    train_online,
)

OUTPUT_ENV = "KDMIX_OUTPUT"
CSV_COLUMNS = ("model", "strategy", "network", "metric", "mean", "std", "seed_count")

# section -> key -> parser; anything else in a config file is an error
_SCHEMA = {
    "task": {"name": str, "output": str},
    "plan": {"config": str, "strategy": str, "temperature": float, "tau": float, "v3_variant": str},
    "weights": {k: float for k in ("alpha", "beta", "gamma", "alpha_p", "beta_p", "gamma_p")},
    "train": {"seeds": str, "epochs": int, "teacher_epochs": int, "batch_size": int, "lr": float,
              "augment": str},
    "data": {"source": str, "n": int, "resolution": int, "seed": int, "index": str, "noise": float},
}


@dataclass
class DataSpec:
    source: str = "synthetic"  # "synthetic" | "index"
    n: int = 2000
    resolution: int | None = None  # 16 (classification) / 32 (segmentation) when unset
    seed: int | None = None  # None: regenerate with each run seed
    index: str | None = None
    noise: float | None = None


@dataclass
class ExperimentConfig:
    task: str
    config: str
    strategy: str
    seeds: list[int]
    weights: dict[str, float] = field(default_factory=dict)
    temperature: float = 2.0
    tau: float = 2.0
    v3_variant: str = "default"
    settings: TrainSettings = field(default_factory=TrainSettings)
    data: DataSpec = field(default_factory=DataSpec)
    output: str | None = None

    @property
    def model(self) -> str:
        return self.config if self.config == STANDALONE else f"{self.config}-{self.strategy}"

    def plan_weights(self) -> dict[str, Weights]:
        w = self.weights
        if self.config == STANDALONE:
            return {S1: Weights(1.0, 0.0, 0.0)}
        alpha = w.get("alpha", 0.2)
        alpha_p = w.get("alpha_p", alpha)
        if self.config != KD_ML:
            # explicit beta/gamma still go through the identity check in build_plan
            base = derive_weights(self.config, alpha, alpha_p)
            return {
                S1: Weights(alpha, w.get("beta", base[S1].beta), w.get("gamma", base[S1].gamma)),
                S2: Weights(alpha_p, w.get("beta_p", w.get("beta", base[S2].beta)),
                            w.get("gamma_p", w.get("gamma", base[S2].gamma))),
            }
        beta, gamma = w.get("beta"), w.get("gamma")
        return derive_weights(KD_ML, alpha, alpha_p, beta, gamma,
                              w.get("beta_p", beta), w.get("gamma_p", gamma))

    def plan(self) -> SharingPlan:
        """Build (and thereby validate) the sharing plan."""
        if self.config == STANDALONE:
            return build_standalone_plan(self.task, tau=self.tau)
        return build_plan(self.config, self.strategy, self.task, self.plan_weights(),
                          self.temperature, self.tau, v3_variant=self.v3_variant)

    def validate(self) -> SharingPlan:
        if self.task not in TASKS:
            raise ConfigurationError(f"[task] name must be one of {TASKS}, got {self.task!r}")
        if not self.seeds:
            raise ConfigurationError("[train] seeds must list at least one seed")
        if self.data.source not in ("synthetic", "index"):
            raise ConfigurationError(f"[data] source must be synthetic or index, got {self.data.source!r}")
        if self.data.source == "index" and not self.data.index:
            raise ConfigurationError("[data] source=index needs an index path")
        s = self.settings
        if s.epochs < 1 or s.batch_size < 1 or s.lr <= 0:
            raise ConfigurationError("[train] epochs and batch_size must be >= 1 and lr > 0")
        return self.plan()


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    """Parse an INI experiment config.  Unknown sections or keys are errors."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                   inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc
    values: dict[str, dict] = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]")
        values[section] = {}
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigurationError(f"unknown key {key!r} in [{section}]")
            try:
                values[section][key] = _SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigurationError(f"[{section}] {key}: {exc}") from exc
    task = values.get("task", {})
    plan = values.get("plan", {})
    train = values.get("train", {})
    dspec = values.get("data", {})
    if "seeds" not in train:
        raise ConfigurationError("[train] seeds is required (seeds are always explicit)")
    try:
        seeds = [int(s) for s in train["seeds"].replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigurationError(f"[train] seeds: {exc}") from exc
    if "name" not in task:
        raise ConfigurationError("[task] name is required")
    if "config" not in plan:
        raise ConfigurationError("[plan] config is required")
    config = plan["config"]
    if config not in CONFIGS + (STANDALONE,):
        raise ConfigurationError(f"[plan] config must be one of {CONFIGS + (STANDALONE,)}, got {config!r}")
    strategy = plan.get("strategy", "-" if config == STANDALONE else None)
    if config != STANDALONE and strategy not in STRATEGIES:
        raise ConfigurationError(f"[plan] strategy must be one of {STRATEGIES}, got {strategy!r}")
    defaults = TrainSettings()
    settings = TrainSettings(
        epochs=train.get("epochs", defaults.epochs),
        teacher_epochs=train.get("teacher_epochs"),
        batch_size=train.get("batch_size", defaults.batch_size),
        lr=train.get("lr", defaults.lr),
        augment=_parse_bool(train["augment"]) if "augment" in train else defaults.augment,
    )
    index = dspec.get("index")
    if index and base_dir is not None and not Path(index).is_absolute():
        index = str(base_dir / index)
    cfg = ExperimentConfig(
        task=task["name"], config=config, strategy=strategy, seeds=seeds,
        weights=values.get("weights", {}),
        temperature=plan.get("temperature", 2.0), tau=plan.get("tau", 2.0),
        v3_variant=plan.get("v3_variant", "default"), settings=settings,
        data=DataSpec(source=dspec.get("source", "synthetic"), n=dspec.get("n", 2000),
                      resolution=dspec.get("resolution"), seed=dspec.get("seed"), index=index,
                      noise=dspec.get("noise")),
        output=task.get("output"),
    )
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), base_dir=path.parent)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def make_splits(cfg: ExperimentConfig, seed: int) -> Splits:
    spec = cfg.data
    if spec.source == "index":
        ds = data_mod.load_index(spec.index, cfg.task)
        if ds.splits is not None:
            return Splits(*data_mod.split_by_tags(ds))
        return Splits(*data_mod.split(ds, seed=seed))
    data_seed = seed if spec.seed is None else spec.seed
    extra = {} if spec.noise is None else {"noise": spec.noise}
    if cfg.task == CLASSIFICATION:
        ds: Dataset = data_mod.synth_classification(spec.n, spec.resolution or 16, seed=data_seed, **extra)
    else:
        ds = data_mod.synth_segmentation(spec.n, spec.resolution or 32, seed=data_seed, **extra)
    return Splits(*data_mod.split(ds, seed=data_seed))


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def output_root(explicit=None) -> Path:
    if explicit is not None:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ENV, "runs"))


def _dump_masks(directory: Path, probs: Mapping[str, np.ndarray], plan: SharingPlan) -> None:
    members = plan.students or list(probs)
    maps = dict(probs)
    maps["Ensemble"] = ensemble_mask([probs[s] for s in members]).astype(np.float32)
    for name, arr in maps.items():
        sub = directory / name
        sub.mkdir(parents=True, exist_ok=True)
        binary = (arr >= 0.5).astype(np.uint8) * 255
        for i in range(binary.shape[0]):
            data_mod.write_pgm(sub / f"{i:04d}.pgm", binary[i, 0])


def run_one(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> RunRecord:
    """Train one seed.  With ``out_dir``, write checkpoints (and masks for segmentation)."""
    plan = cfg.validate()
    splits = make_splits(cfg, seed)
    cohort = build_cohort(plan, splits.train.in_shape, splits.train.n_classes, seed=seed)
    ckpt_dir = None
    if out_dir is not None:
        ckpt_dir = out_dir / "checkpoints" / f"seed{seed}"
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def after_phase1(c):
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / "teacher_phase1.ckpt", dict(c.nets[plan.teacher].state_dict()))

    if plan.schedule == OFFLINE:
        rec = train_offline(cohort, splits, cfg.settings, seed, after_phase1=after_phase1)
    else:
        rec = train_online(cohort, splits, cfg.settings, seed)
    if ckpt_dir is not None:
        for name, net in sorted(cohort.nets.items()):
            save_checkpoint(ckpt_dir / f"{name}.ckpt", dict(net.state_dict()))
        for (src, dst), adapter in sorted(cohort.adapters.items()):
            save_checkpoint(ckpt_dir / f"adapter_{src}_{dst}.ckpt",
                            {k: v.data for k, v in adapter.params.items()})
        if cfg.task != CLASSIFICATION:
            _dump_masks(out_dir / "masks" / f"seed{seed}", predict(cohort, splits.test), plan)
    return rec


def summary_rows(cfg: ExperimentConfig, records: Sequence[RunRecord]) -> list[dict]:
    model = cfg.config
    rows = []
    for network, per_metric in summarize(records).items():
        for metric, (mu, sd, n) in per_metric.items():
            rows.append({"model": model, "strategy": cfg.strategy, "network": network,
                         "metric": metric, "mean": mu, "std": sd, "seed_count": n})
    return rows


def write_csv(path, rows: Iterable[Mapping]) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(float(r[k])) if k in ("mean", "std") else r[k]) for k in CSV_COLUMNS})
    Path(path).write_text(buf.getvalue())


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["mean"], r["std"], r["seed_count"] = float(r["mean"]), float(r["std"]), int(r["seed_count"])
    return rows


@dataclass
class ExperimentResult:
    out_dir: Path
    records: list[RunRecord]
    rows: list[dict]


def run_experiment(cfg: ExperimentConfig, root=None) -> ExperimentResult:
    """Train every seed, then write ``records.jsonl``, ``summary.csv``, checkpoints and masks."""
    cfg.validate()
    out_dir = output_root(root) / (cfg.output or cfg.model)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [run_one(cfg, seed, out_dir) for seed in cfg.seeds]
    with open(out_dir / "records.jsonl", "w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    rows = summary_rows(cfg, records)
    write_csv(out_dir / "summary.csv", rows)
    return ExperimentResult(out_dir, records, rows)


def sweep_configs(base: ExperimentConfig) -> list[ExperimentConfig]:
    """The 12 models: every configuration crossed with every strategy.

    Weights come from ``base.weights``; KD-only and ML-only cells only take
    ``alpha``/``alpha_p`` from it and derive the rest from their identities.
    """
    out = []
    for config in CONFIGS:
        for strategy in STRATEGIES:
            w = dict(base.weights)
            if config != KD_ML:
                w = {k: v for k, v in w.items() if k in ("alpha", "alpha_p")}
            out.append(replace(base, config=config, strategy=strategy, weights=w,
                               v3_variant="default", output=f"{config}-{strategy}"))
    return out


def _run_cfg(args):
    cfg, root = args
    return run_experiment(cfg, root).rows


def run_sweep(base: ExperimentConfig, root=None, jobs: int = 1) -> list[dict]:
    """Run all 12 models; with ``jobs > 1`` cells run in separate processes."""
    cfgs = sweep_configs(base)
    for c in cfgs:
        c.validate()
    root = output_root(root) / (base.output or "sweep")
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_cfg, [(c, root) for c in cfgs]))
    else:
        parts = [_run_cfg((c, root)) for c in cfgs]
    rows = [r for part in parts for r in part]
    write_csv(root / "summary.csv", rows)
    return rows


def run_gridsearch(cfg: ExperimentConfig, space: Mapping[str, Sequence[float]] | None = None,
                   budget_epochs: int = 5, root=None) -> dict:
    """Grid search on the first seed's validation split; writes ``gridsearch.json``."""
    plan = cfg.validate()
    if plan.config == STANDALONE:
        raise ConfigurationError("grid search needs a sharing configuration")
    seed = cfg.seeds[0]
    splits = make_splits(cfg, seed)
    budget = replace(cfg.settings, epochs=budget_epochs)
    best, scored = search_weights(cfg.config, cfg.strategy, splits, budget, seed=seed, space=space,
                                  task=cfg.task, temperature=cfg.temperature)
    result = {
        "model": cfg.model, "seed": seed, "budget_epochs": budget_epochs,
        "best": {k: list(w.as_tuple()) for k, w in sorted(best.items())},
        "cells": [{"weights": {k: list(w.as_tuple()) for k, w in sorted(c.items())}, "score": s}
                  for c, s in scored],
    }
    out_dir = output_root(root) / (cfg.output or cfg.model)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "gridsearch.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


# ---------------------------------------------------------------------------
# comparison report
# ---------------------------------------------------------------------------

def _primary_metric(rows: Sequence[Mapping]) -> str:
    metrics = {r["metric"] for r in rows}
    return "accuracy" if "accuracy" in metrics else "IoU"


def compare_report(rows: Sequence[Mapping], metric: str | None = None) -> list[dict]:
    """Per configuration: V1/V2/V3 ensemble means and whether V3 is strictly best.

    Each row also carries ``kdml_best``: whether this configuration's best
    ensemble mean beats every other configuration's best (set on all rows of a
    configuration alike).  Ties make a flag false and leave a note.
    """
    metric = metric or _primary_metric(rows)
    ens = {(r["model"], r["strategy"]): float(r["mean"]) for r in rows
           if r["network"] == "Ensemble" and r["metric"] == metric}
    configs = [c for c in CONFIGS if any((c, s) in ens for s in STRATEGIES)]
    best_of = {c: max(ens[(c, s)] for s in STRATEGIES if (c, s) in ens) for c in configs}
    out = []
    for c in configs:
        means = {s: ens.get((c, s)) for s in STRATEGIES}
        present = {s: m for s, m in means.items() if m is not None}
        others = [m for s, m in present.items() if s != "V3"]
        v3 = present.get("V3")
        v3_best = v3 is not None and all(v3 > m for m in others)
        notes = []
        if v3 is not None and any(v3 == m for m in others):
            notes.append("V3 tied")
        other_best = [best_of[o] for o in configs if o != c]
        kdml_best = c == KD_ML and all(best_of[c] > b for b in other_best)
        if c == KD_ML and any(best_of[c] == b for b in other_best):
            notes.append("KD+ML tied")
        for s in STRATEGIES:
            out.append({"config": c, "strategy": s, "metric": metric, "ensemble_mean": means[s],
                        "v3_best": v3_best, "kdml_best": kdml_best, "note": "; ".join(notes)})
    return out


def format_compare(table: Sequence[Mapping]) -> str:
    lines = [f"{'config':<8} {'strategy':<8} {'ensemble':>9}  v3_best  kdml_best  note"]
    for r in table:
        m = "-" if r["ensemble_mean"] is None else f"{r['ensemble_mean']:.4f}"
        lines.append(f"{r['config']:<8} {r['strategy']:<8} {m:>9}  {str(r['v3_best']):<7}  "
                     f"{str(r['kdml_best']):<9}  {r['note']}")
    return "\n".join(lines)


def collect_rows(paths: Iterable) -> list[dict]:
    """Summary rows from CSV files or directories (searched recursively for ``summary.csv``)."""
    rows: list[dict] = []
    seen = set()
    for p in paths:
        p = Path(p)
        files = sorted(p.rglob("summary.csv")) if p.is_dir() else [p]
        for f in files:
            for r in read_csv(f):
                key = (r["model"], r["strategy"], r["network"], r["metric"])
                if key not in seen:
                    seen.add(key)
                    rows.append(r)
    return rows

