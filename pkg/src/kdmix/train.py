"""Adam, online/offline training schedules, grid search and multi-seed statistics."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor
from .data import Dataset, augment
from .evaluate import ensemble_classify, ensemble_mask, metrics
from .sharing import (
    CLASSIFICATION,
    KD_ML,
    OFFLINE,
    S1,
    S2,
    Cohort,
    LossReport,
    LossTerm,
    SharingPlan,
    Weights,
    build_cohort,
    build_plan,
    check_weights,
    derive_weights,
    student_objective,
    teacher_objective,
)

log = logging.getLogger(__name__)

DEFAULT_LR = 1e-4
DEFAULT_BATCH = 8
DEFAULT_GRID = (0.1, 0.2, 0.3, 0.4, 0.45)
WEIGHT_KEYS = ("alpha", "beta", "gamma", "alpha_p", "beta_p", "gamma_p")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, network: str, value: float):
        super().__init__(f"non-finite loss {value} for {network} at step {step}")
        self.step, self.network, self.value = step, network, value


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    params: list[Tensor]
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(p.shape, dtype=np.float64) for p in self.params]
            self.v = [np.zeros(p.shape, dtype=np.float64) for p in self.params]


def adam_step(state: AdamState, params: Sequence[Tensor] | None = None,
              grads: Sequence[np.ndarray | None] | None = None) -> None:
    """One bias-corrected Adam update, in place.  A missing gradient counts as zero."""
    params = state.params if params is None else list(params)
    if grads is None:
        grads = [p.grad for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        update = state.lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        p.data = (p.data.astype(np.float64) - update).astype(p.dtype)


# ---------------------------------------------------------------------------
# records
# ---------------------------------------------------------------------------

class Splits(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


@dataclass
class TrainSettings:
    epochs: int = 20
    teacher_epochs: int | None = None  # offline phase 1; defaults to ``epochs``
    batch_size: int = DEFAULT_BATCH
    lr: float = DEFAULT_LR
    augment: bool = True


@dataclass
class RunRecord:
    fingerprint: str
    plan: str
    seed: int
    weights: dict
    epochs: list[dict]
    metrics: dict[str, dict[str, float]]
    ensemble: dict[str, float]
    wall_clock: float = 0.0
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))


def fingerprint(plan: SharingPlan, seed: int, dataset_hash: str, settings: TrainSettings) -> str:
    payload = {
        "plan": plan.label(), "task": plan.task, "strategy": plan.strategy,
        "edges": [[e.src, e.dst, e.channel] for e in plan.edges],
        "weights": {k: list(w.as_tuple()) for k, w in sorted(plan.weights.items())},
        "T": plan.temperature, "tau": plan.tau, "seed": seed, "data": dataset_hash,
        "settings": asdict(settings),
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def _mean_reports(reports: list[LossReport]) -> dict:
    n = len(reports)
    first = reports[0]
    terms = [LossTerm(t.name, t.weight, math.fsum(r.terms[i].value for r in reports) / n)
             for i, t in enumerate(first.terms)]
    total = math.fsum(r.total for r in reports) / n
    return LossReport(first.network, terms, total).as_dict()


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def predict(cohort: Cohort, ds: Dataset, batch_size: int = 64) -> dict[str, np.ndarray]:
    """Probabilities per network: ``(N, C)`` softmax or ``(N, 1, H, W)`` sigmoid maps."""
    out: dict[str, list[np.ndarray]] = {name: [] for name in cohort.nets}
    with ad.no_grad():
        for xb, _ in ds.batches(batch_size):
            x = Tensor(xb)
            for name, net in cohort.nets.items():
                res = net.forward(x)
                if cohort.plan.task == CLASSIFICATION:
                    out[name].append(losses.softmax_t(res.logits, 1.0).data)
                else:
                    out[name].append(res.output.data)
    return {k: np.concatenate(v) for k, v in out.items()}


def evaluate_cohort(cohort: Cohort, ds: Dataset, probs: dict[str, np.ndarray] | None = None
                    ) -> tuple[dict[str, dict[str, float]], dict[str, float]]:
    """Per-network metrics and the student ensemble metric on ``ds``."""
    probs = predict(cohort, ds) if probs is None else probs
    task = cohort.plan.task
    per_net = {}
    for name, p in probs.items():
        pred = p.argmax(axis=1) if task == CLASSIFICATION else p >= 0.5
        per_net[name] = metrics(pred, ds.targets, task)
    members = cohort.plan.students or [n for n, _ in cohort.plan.networks]
    students = [probs[s] for s in members]
    if task == CLASSIFICATION:
        ens = metrics(ensemble_classify(students), ds.targets, task)
    else:
        ens = metrics(ensemble_mask(students), ds.targets, task)
    return per_net, ens


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def _check_finite(step: int, name: str, value: float) -> None:
    if not math.isfinite(value):
        raise NonFiniteLossError(step, name, value)


def _epoch(cohort: Cohort, active: list[str], frozen: list[str], train: Dataset,
           optimizers: Mapping[str, AdamState], settings: TrainSettings, rng: np.random.Generator,
           step0: int, teacher_only: bool = False) -> tuple[dict, int]:
    plan = cohort.plan
    reports: dict[str, list[LossReport]] = {n: [] for n in active}
    step = step0
    for xb, yb in train.batches(settings.batch_size, rng):
        if settings.augment:
            xb, yb = augment(xb, yb, rng=rng)
        x = Tensor(xb)
        outputs = {name: cohort.nets[name].forward(x) for name in active}
        if frozen:
            with ad.no_grad():
                for name in frozen:
                    outputs[name] = cohort.nets[name].forward(x)
        objectives = []
        for name in active:
            if name == plan.teacher:
                loss, rep = teacher_objective(plan, outputs, yb)
            else:
                loss, rep = student_objective(plan, name, outputs, yb, cohort.adapters)
            _check_finite(step, name, rep.total)
            objectives.append((name, loss))
            reports[name].append(rep)
        # every gradient is computed before any parameter moves
        for name, loss in objectives:
            ad.zero_grad(optimizers[name].params)
        for name, loss in objectives:
            ad.backward(loss)
        for name, _ in objectives:
            adam_step(optimizers[name])
        step += 1
    return {n: _mean_reports(r) for n, r in reports.items() if r}, step


def _optimizers(cohort: Cohort, names: Iterable[str], lr: float) -> dict[str, AdamState]:
    return {n: AdamState(cohort.owned_parameters(n), lr=lr) for n in names}


def _finish(cohort: Cohort, splits: Splits, seed: int, settings: TrainSettings,
            history: list[dict], t0: float) -> RunRecord:
    per_net, ens = evaluate_cohort(cohort, splits.test)
    plan = cohort.plan
    return RunRecord(
        fingerprint=fingerprint(plan, seed, splits.train.fingerprint(), settings),
        plan=plan.label(), seed=seed,
        weights={k: list(w.as_tuple()) for k, w in sorted(plan.weights.items())},
        epochs=history, metrics=per_net, ensemble=ens,
        wall_clock=time.perf_counter() - t0, settings=asdict(settings),
    )


def train_online(cohort: Cohort, splits: Splits, settings: TrainSettings, seed: int) -> RunRecord:
    """All networks in the plan train together; the teacher (if any) on ground truth only."""
    t0 = time.perf_counter()
    plan = cohort.plan
    if plan.schedule == OFFLINE:
        raise ad.ContractError("offline plans are trained with train_offline")
    active = [n for n, _ in plan.networks]
    opts = _optimizers(cohort, active, settings.lr)
    rng = np.random.default_rng([seed, 1])
    history, step = [], 0
    for epoch in range(settings.epochs):
        reps, step = _epoch(cohort, active, [], splits.train, opts, settings, rng, step)
        history.append({"epoch": epoch, "phase": "joint", "reports": reps})
        log.debug("%s seed=%d epoch=%d %s", plan.label(), seed, epoch,
                  {k: round(v["total"], 4) for k, v in reps.items()})
    return _finish(cohort, splits, seed, settings, history, t0)


def train_offline(cohort: Cohort, splits: Splits, settings: TrainSettings, seed: int,
                  after_phase1: Callable[[Cohort], None] | None = None) -> RunRecord:
    """Phase 1 trains the teacher alone; phase 2 freezes it and trains the students."""
    t0 = time.perf_counter()
    plan = cohort.plan
    teacher = plan.teacher
    if teacher is None:
        raise ad.ContractError("offline training needs a teacher")
    rng = np.random.default_rng([seed, 1])
    history, step = [], 0
    opts = _optimizers(cohort, [teacher], settings.lr)
    t_epochs = settings.epochs if settings.teacher_epochs is None else settings.teacher_epochs
    for epoch in range(t_epochs):
        reps, step = _epoch(cohort, [teacher], [], splits.train, opts, settings, rng, step)
        history.append({"epoch": epoch, "phase": "teacher", "reports": reps})
    if after_phase1 is not None:
        after_phase1(cohort)
    students = plan.students
    opts = _optimizers(cohort, students, settings.lr)
    for epoch in range(settings.epochs):
        reps, step = _epoch(cohort, students, [teacher], splits.train, opts, settings, rng, step)
        history.append({"epoch": epoch, "phase": "students", "reports": reps})
    return _finish(cohort, splits, seed, settings, history, t0)


def train_plan(plan: SharingPlan, splits: Splits, settings: TrainSettings, seed: int,
               return_cohort: bool = False):
    cohort = build_cohort(plan, splits.train.in_shape, splits.train.n_classes, seed=seed)
    if plan.schedule == OFFLINE:
        rec = train_offline(cohort, splits, settings, seed)
    else:
        rec = train_online(cohort, splits, settings, seed)
    return (rec, cohort) if return_cohort else rec


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------

def default_space(config: str, grid: Sequence[float] = DEFAULT_GRID) -> dict[str, list[float]]:
    """Free weights searched by default; the rest follow the plan identities.

    KD+ML ties beta = gamma = (1 - alpha) / 2 per student unless the space
    lists beta/gamma explicitly.
    """
    return {"alpha": list(grid), "alpha_p": list(grid)}


def grid_cells(config: str, space: Mapping[str, Sequence[float]]) -> list[dict[str, Weights]]:
    """Enumerate weight sets for ``config``; cells violating the plan identities are dropped.

    A missing primed key mirrors its unprimed counterpart.
    """
    unknown = set(space) - set(WEIGHT_KEYS)
    if unknown:
        raise ValueError(f"unknown weight keys {sorted(unknown)}")
    keys = [k for k in WEIGHT_KEYS if k in space]
    cells = []
    for values in itertools.product(*(space[k] for k in keys)):
        chosen = dict(zip(keys, values))
        for k in ("alpha", "beta", "gamma"):
            if k in chosen and k + "_p" not in chosen:
                chosen[k + "_p"] = chosen[k]
        base = derive_weights(config, chosen.get("alpha", 1.0), chosen.get("alpha_p", chosen.get("alpha", 1.0)))
        w1, w2 = base[S1], base[S2]
        w = {
            S1: Weights(w1.alpha, chosen.get("beta", w1.beta), chosen.get("gamma", w1.gamma)),
            S2: Weights(w2.alpha, chosen.get("beta_p", w2.beta), chosen.get("gamma_p", w2.gamma)),
        }
        if config != KD_ML and check_weights(config, w):
            continue
        if w not in cells:
            cells.append(w)
    return cells


def _tiebreak_key(w: Mapping[str, Weights]) -> tuple:
    extra = w[S1].beta + w[S1].gamma + w[S2].beta + w[S2].gamma
    return (round(extra, 12),) + w[S1].as_tuple() + w[S2].as_tuple()


def grid_search(cells: Sequence[Mapping[str, Weights]], objective: Callable[[Mapping[str, Weights]], float]
                ) -> tuple[dict[str, Weights], list[tuple[dict[str, Weights], float]]]:
    """Evaluate ``objective`` on every cell; return the best cell and all scores.

    Highest score wins; ties go to the smallest total beta+gamma, then to the
    lexicographically smallest weight tuple.
    """
    if not cells:
        raise ValueError("empty grid")
    scored = [(dict(c), float(objective(c))) for c in cells]
    best = min(scored, key=lambda cs: (-cs[1],) + _tiebreak_key(cs[0]))
    return best[0], scored


def search_weights(config: str, strategy: str, splits: Splits, budget: TrainSettings, seed: int = 0,
                   space: Mapping[str, Sequence[float]] | None = None, task: str = CLASSIFICATION,
                   temperature: float = 2.0, metric: str | None = None):
    """Grid search scored by the validation ensemble metric after a short training budget."""
    metric = metric or ("accuracy" if task == CLASSIFICATION else "IoU")
    cells = grid_cells(config, space or default_space(config))

    def objective(w):
        plan = build_plan(config, strategy, task, w, temperature)
        _, cohort = train_plan(plan, splits, budget, seed, return_cohort=True)
        _, ens = evaluate_cohort(cohort, splits.val)
        return ens[metric]

    return grid_search(cells, objective)


# ---------------------------------------------------------------------------
# multi-seed statistics
# ---------------------------------------------------------------------------

def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population (divide-by-n) standard deviation."""
    vals = [float(v) for v in values]
    return statistics.fmean(vals), statistics.pstdev(vals)


def summarize(records: Sequence[RunRecord]) -> dict[str, dict[str, tuple[float, float, int]]]:
    """``{network|"Ensemble": {metric: (mean, std, n)}}`` over the records."""
    out: dict[str, dict[str, tuple[float, float, int]]] = {}
    names = list(records[0].metrics) + ["Ensemble"]
    for name in names:
        rows = [r.ensemble if name == "Ensemble" else r.metrics[name] for r in records]
        out[name] = {}
        for m in rows[0]:
            mu, sd = mean_std([row[m] for row in rows])
            out[name][m] = (mu, sd, len(rows))
    return out


def multi_run(run: Callable[[int], RunRecord], seeds: Sequence[int] = (0, 1, 2)
              ) -> tuple[list[RunRecord], dict[str, dict[str, tuple[float, float, int]]]]:
    records = [run(s) for s in seeds]
    return records, summarize(records)
