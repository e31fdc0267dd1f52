"""Knowledge-sharing topologies and the per-network composite objectives.

A :class:`SharingPlan` names the networks (``T``, ``S1``, ``S2``), the
knowledge edges between them with their channel (predictions or features),
the per-student loss weights and the training schedule.  Objectives are
assembled from a single forward pass of every network; knowledge arriving
over an edge is detached, so each objective only moves its own network (and
the adapters it owns).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import ContractError, Tensor
from .nets import (
    CLASSIFIER_TAP,
    SEGMENTER_TAP,
    STUDENT,
    TEACHER,
    AdapterBlock,
    ConfigurationError,
    ForwardResult,
    Network,
    build_classifier,
    build_segmenter,
)

ML, KD_ON, KD_OFF, KD_ML = "ML", "KD_on", "KD_off", "KD_ML"
STANDALONE = "standalone"
CONFIGS = (ML, KD_ON, KD_OFF, KD_ML)
STRATEGIES = ("V1", "V2", "V3")
PRED, FEAT = "predictions", "features"
ONLINE, OFFLINE = "online", "offline"
CLASSIFICATION, SEGMENTATION = "classification", "segmentation"
TASKS = (CLASSIFICATION, SEGMENTATION)

T, S1, S2 = "T", "S1", "S2"
DEFAULT_TEMPERATURE = 2.0

_P, _F = PRED, FEAT
# (src, dst) -> channel for every cell; mirrors the published strategy matrix.
EDGE_TABLE: dict[tuple[str, str], dict[tuple[str, str], str]] = {
    (KD_ON, "V1"): {(T, S1): _P, (T, S2): _P},
    (KD_ON, "V2"): {(T, S1): _F, (T, S2): _F},
    (KD_ON, "V3"): {(T, S1): _P, (T, S2): _F},
    (ML, "V1"): {(S1, S2): _P, (S2, S1): _P},
    (ML, "V2"): {(S1, S2): _F, (S2, S1): _F},
    (ML, "V3"): {(S1, S2): _P, (S2, S1): _F},
    (KD_ML, "V1"): {(T, S1): _P, (S2, S1): _P, (T, S2): _P, (S1, S2): _P},
    (KD_ML, "V2"): {(T, S1): _F, (S2, S1): _F, (T, S2): _F, (S1, S2): _F},
    (KD_ML, "V3"): {(T, S1): _F, (S2, S1): _P, (T, S2): _P, (S1, S2): _F},
}
EDGE_TABLE[(KD_OFF, "V1")] = EDGE_TABLE[(KD_ON, "V1")]
EDGE_TABLE[(KD_OFF, "V2")] = EDGE_TABLE[(KD_ON, "V2")]
EDGE_TABLE[(KD_OFF, "V3")] = EDGE_TABLE[(KD_ON, "V3")]

# Non-default KD+ML V3 variant: every channel swapped.
KD_ML_V3_SWAPPED = {(T, S1): _P, (S2, S1): _F, (T, S2): _F, (S1, S2): _P}


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    channel: str

    @property
    def kind(self) -> str:
        """``KD`` for teacher edges, ``ML`` for student-to-student edges."""
        return "KD" if self.src == T else "ML"


@dataclass(frozen=True)
class Weights:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)


@dataclass(frozen=True)
class SharingPlan:
    config: str
    strategy: str
    task: str
    networks: tuple[tuple[str, str], ...]
    edges: tuple[Edge, ...]
    weights: Mapping[str, Weights]
    schedule: str = ONLINE
    temperature: float = DEFAULT_TEMPERATURE
    tau: float = losses.DEFAULT_TAU

    @property
    def students(self) -> list[str]:
        return [n for n, role in self.networks if role == STUDENT]

    @property
    def teacher(self) -> str | None:
        for n, role in self.networks:
            if role == TEACHER:
                return n
        return None

    def incoming(self, dst: str) -> list[Edge]:
        return [e for e in self.edges if e.dst == dst]

    def channel_matrix(self) -> dict[tuple[str, str], str]:
        return {(e.src, e.dst): e.channel for e in self.edges}

    def with_weights(self, weights: Mapping[str, Weights]) -> "SharingPlan":
        return replace(self, weights=dict(weights))

    @property
    def teacher_cotrained(self) -> bool:
        return self.teacher is not None and self.schedule == ONLINE

    def label(self) -> str:
        return self.config if self.config == STANDALONE else f"{self.config}-{self.strategy}"


def check_weights(config: str, weights: Mapping[str, Weights], tol: float = 1e-9) -> list[str]:
    """List every violated weight identity for ``config`` (empty if consistent)."""
    problems = []
    for s in (S1, S2):
        if s not in weights:
            problems.append(f"missing weights for {s}")
            continue
        w = weights[s]
        if any(not math.isfinite(v) or v < 0 for v in w.as_tuple()):
            problems.append(f"{s}: weights must be finite and non-negative, got {w.as_tuple()}")
        if config in (KD_ON, KD_OFF):
            if abs(w.gamma) > tol:
                problems.append(f"{s}: KD-only requires gamma = 0, got {w.gamma}")
            if abs(w.beta - (1 - w.alpha)) > tol:
                problems.append(f"{s}: KD-only requires beta = 1 - alpha, got beta={w.beta}, alpha={w.alpha}")
        elif config == ML:
            if abs(w.beta) > tol:
                problems.append(f"{s}: ML-only requires beta = 0, got {w.beta}")
            if abs(w.gamma - (1 - w.alpha)) > tol:
                problems.append(f"{s}: ML-only requires gamma = 1 - alpha, got gamma={w.gamma}, alpha={w.alpha}")
    return problems


def derive_weights(config: str, alpha: float, alpha_p: float, beta=None, gamma=None,
                   beta_p=None, gamma_p=None) -> dict[str, Weights]:
    """Complete a weight set from the free parameters of ``config``.

    KD-only and ML-only need just ``alpha``/``alpha_p``.  For KD+ML any
    omitted beta/gamma defaults to ``(1 - alpha) / 2``.
    """
    if config in (KD_ON, KD_OFF):
        return {S1: Weights(alpha, 1 - alpha, 0.0), S2: Weights(alpha_p, 1 - alpha_p, 0.0)}
    if config == ML:
        return {S1: Weights(alpha, 0.0, 1 - alpha), S2: Weights(alpha_p, 0.0, 1 - alpha_p)}
    if config == KD_ML:
        half, half_p = (1 - alpha) / 2, (1 - alpha_p) / 2
        return {
            S1: Weights(alpha, half if beta is None else beta, half if gamma is None else gamma),
            S2: Weights(alpha_p, half_p if beta_p is None else beta_p, half_p if gamma_p is None else gamma_p),
        }
    raise ConfigurationError(f"unknown config {config!r}")


def build_plan(config: str, strategy: str, task: str = CLASSIFICATION,
               weights: Mapping[str, Weights] | None = None,
               temperature: float = DEFAULT_TEMPERATURE, tau: float = losses.DEFAULT_TAU,
               v3_variant: str = "default", validate: bool = True) -> SharingPlan:
    if config not in CONFIGS:
        raise ConfigurationError(f"unknown config {config!r}; expected one of {CONFIGS}")
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}")
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    if weights is None:
        weights = derive_weights(config, 0.2, 0.2)
    if validate:
        problems = check_weights(config, weights)
        if problems:
            raise ConfigurationError("inconsistent weights: " + "; ".join(problems))
    table = EDGE_TABLE[(config, strategy)]
    if v3_variant == "swapped":
        if (config, strategy) != (KD_ML, "V3"):
            raise ConfigurationError("the swapped variant only exists for KD_ML V3")
        table = KD_ML_V3_SWAPPED
    elif v3_variant != "default":
        raise ConfigurationError(f"unknown v3_variant {v3_variant!r}")
    networks = ((S1, STUDENT), (S2, STUDENT))
    if config != ML:
        networks = ((T, TEACHER),) + networks
    edges = tuple(Edge(src, dst, ch) for (src, dst), ch in table.items())
    return SharingPlan(
        config=config, strategy=strategy, task=task, networks=networks, edges=edges,
        weights={k: weights[k] for k in (S1, S2)},
        schedule=OFFLINE if config == KD_OFF else ONLINE,
        temperature=temperature, tau=tau,
    )


def build_standalone_plan(task: str = CLASSIFICATION, capacity: str = STUDENT,
                          tau: float = losses.DEFAULT_TAU) -> SharingPlan:
    """One network trained on ground truth only (the baseline rows)."""
    name = T if capacity == TEACHER else S1
    return SharingPlan(config=STANDALONE, strategy="-", task=task, networks=((name, capacity),),
                       edges=(), weights={name: Weights(1.0, 0.0, 0.0)}, tau=tau)


# ---------------------------------------------------------------------------
# networks and adapters for a plan
# ---------------------------------------------------------------------------

@dataclass
class Cohort:
    plan: SharingPlan
    nets: dict[str, Network]
    adapters: dict[tuple[str, str], AdapterBlock] = field(default_factory=dict)

    def owned_parameters(self, name: str) -> list[Tensor]:
        """Parameters updated by ``name``'s optimizer: its own plus adapters on its incoming edges."""
        params = list(self.nets[name].parameters())
        for (_, dst), adapter in sorted(self.adapters.items()):
            if dst == name:
                params.extend(adapter.parameters())
        return params

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.nets):
            for k, v in self.nets[name].params.items():
                out[f"{name}/{k}"] = v.data
        for (src, dst), adapter in sorted(self.adapters.items()):
            for k, v in adapter.params.items():
                out[f"adapter:{src}->{dst}/{k}"] = v.data
        return out


def tap_name(task: str) -> str:
    return CLASSIFIER_TAP if task == CLASSIFICATION else SEGMENTER_TAP


def build_cohort(plan: SharingPlan, in_shape, n_classes: int = 2, seed: int = 0) -> Cohort:
    nets: dict[str, Network] = {}
    for name, role in plan.networks:
        if plan.task == CLASSIFICATION:
            nets[name] = build_classifier(role, in_shape, n_classes, seed=seed, name=name)
        else:
            nets[name] = build_segmenter(role, in_shape, seed=seed, name=name)
    adapters = {}
    tap = tap_name(plan.task)
    for e in plan.edges:
        if e.channel != FEAT:
            continue
        src_shape = nets[e.src].tap_shape(tap)[1:]
        dst_shape = nets[e.dst].tap_shape(tap)[1:]
        if src_shape != dst_shape:
            adapters[(e.src, e.dst)] = AdapterBlock(src_shape, dst_shape, seed=seed,
                                                    name=f"adapter:{e.src}->{e.dst}")
    return Cohort(plan=plan, nets=nets, adapters=adapters)


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

@dataclass
class LossTerm:
    name: str
    weight: float
    value: float


@dataclass
class LossReport:
    network: str
    terms: list[LossTerm]
    total: float

    def reconstruct(self) -> float:
        return float(sum(t.weight * t.value for t in self.terms))

    def as_dict(self) -> dict:
        return {"network": self.network, "total": self.total,
                "terms": [{"name": t.name, "weight": t.weight, "value": t.value} for t in self.terms]}


def task_loss(plan: SharingPlan, result: ForwardResult, target) -> Tensor:
    if plan.task == CLASSIFICATION:
        return losses.cross_entropy(losses.softmax_t(result.logits, 1.0), target)
    return losses.fd_loss(result.output, target, plan.tau)


def _soft_prediction(plan: SharingPlan, result: ForwardResult) -> Tensor:
    if plan.task == CLASSIFICATION:
        return losses.softmax_t(result.logits, plan.temperature)
    return losses.binary_as_classes(losses.sigmoid_t(result.logits, plan.temperature))


def edge_loss(plan: SharingPlan, edge: Edge, outputs: Mapping[str, ForwardResult],
              adapters: Mapping[tuple[str, str], AdapterBlock] | None = None) -> Tensor:
    src, dst = outputs[edge.src], outputs[edge.dst]
    if edge.channel == PRED:
        target = _soft_prediction(plan, src).detach()
        return losses.kl_div(target, _soft_prediction(plan, dst))
    tap = tap_name(plan.task)
    if tap not in src.taps or tap not in dst.taps:
        raise ConfigurationError(f"feature edge {edge.src}->{edge.dst} needs tap {tap!r} on both ends")
    incoming = src.taps[tap].detach()
    adapter = (adapters or {}).get((edge.src, edge.dst))
    if adapter is not None:
        incoming = adapter(incoming)
    return losses.feature_mse(dst.taps[tap], incoming)


def _combine(network: str, parts: list[tuple[str, float, Tensor]]) -> tuple[Tensor, LossReport]:
    total = None
    for _, w, value in parts:
        if w == 0:
            continue
        term = ad.scale(value, w)
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = ad.scale(parts[0][2], 0.0)
    report = LossReport(network, [LossTerm(n, float(w), v.item()) for n, w, v in parts], total.item())
    return total, report


def student_objective(plan: SharingPlan, student: str, outputs: Mapping[str, ForwardResult], target,
                      adapters: Mapping[tuple[str, str], AdapterBlock] | None = None
                      ) -> tuple[Tensor, LossReport]:
    """Weighted task + KD + ML objective of one student.

    The task term is cross-entropy (classification) or focal+dice
    (segmentation).  Teacher edges are weighted by beta, peer edges by gamma.
    """
    if student not in plan.students:
        raise ContractError(f"{student!r} is not a student of this plan")
    w = plan.weights[student]
    parts: list[tuple[str, float, Tensor]] = [
        ("CE" if plan.task == CLASSIFICATION else "FD", w.alpha, task_loss(plan, outputs[student], target))
    ]
    for e in plan.incoming(student):
        weight = w.beta if e.kind == "KD" else w.gamma
        parts.append((f"{e.kind}_{e.channel[0]}", weight, edge_loss(plan, e, outputs, adapters)))
    return _combine(student, parts)


def teacher_objective(plan: SharingPlan, outputs: Mapping[str, ForwardResult], target,
                      phase: int = 1) -> tuple[Tensor, LossReport]:
    """Ground-truth-only objective of the teacher (offline phase 2 has none)."""
    t = plan.teacher
    if t is None:
        raise ContractError(f"plan {plan.label()} has no teacher")
    if plan.schedule == OFFLINE and phase != 1:
        raise ContractError("offline teacher is frozen after phase 1")
    loss = task_loss(plan, outputs[t], target)
    name = "CE" if plan.task == CLASSIFICATION else "FD"
    return loss, LossReport(t, [LossTerm(name, 1.0, loss.item())], loss.item())


# ---------------------------------------------------------------------------
# reduction identities
# ---------------------------------------------------------------------------

def _student_mapping(full: SharingPlan, reduced: SharingPlan, kind: str) -> dict[str, str] | None:
    """Relabeling of ``full``'s students that makes its ``kind`` edges equal ``reduced``'s edges."""
    kept = {(e.src, e.dst, e.channel) for e in full.edges if e.kind == kind}
    target = {(e.src, e.dst, e.channel) for e in reduced.edges}
    for perm in itertools.permutations(reduced.students):
        m = dict(zip(full.students, perm))
        m[T] = T
        if {(m[s], m[d], c) for s, d, c in kept} == target:
            return m
    return None


def _reduces(full: SharingPlan, reduced: SharingPlan, kind: str, outputs, target, adapters, tol) -> bool:
    mapping = _student_mapping(full, reduced, kind)
    if mapping is None:
        return False
    weights = {}
    for s in full.students:
        a = full.weights[s].alpha
        weights[s] = Weights(a, 1 - a, 0.0) if kind == "KD" else Weights(a, 0.0, 1 - a)
    collapsed = full.with_weights(weights)
    relabeled = {mapping.get(k, k): v for k, v in outputs.items()}
    relabeled_adapters = {(mapping[s], mapping[d]): a for (s, d), a in (adapters or {}).items()}
    for s in full.students:
        with ad.no_grad():
            lhs, _ = student_objective(collapsed, s, outputs, target, adapters)
            rhs, _ = student_objective(reduced, mapping[s], relabeled, target, relabeled_adapters)
        if abs(lhs.item() - rhs.item()) > tol:
            return False
    return True


def reduction_check(plan_kdml: SharingPlan, plan_kd: SharingPlan, plan_ml: SharingPlan,
                    outputs: Mapping[str, ForwardResult], target,
                    adapters: Mapping[tuple[str, str], AdapterBlock] | None = None,
                    tol: float = 1e-9) -> bool:
    """Check that KD+ML collapses to KD-only (gamma=0, beta=1-alpha) and to ML-only.

    The collapsed KD+ML objective takes each student's alpha from ``plan_kdml``
    and is compared with the objectives of ``plan_kd``/``plan_ml`` under their
    own weights.  Students are identical, so the comparison is made up to a
    relabeling of S1/S2 where the strategy matrices assign channels in
    mirrored order.
    """
    if plan_kdml.config != KD_ML or plan_kd.config not in (KD_ON, KD_OFF) or plan_ml.config != ML:
        raise ContractError("reduction_check expects (KD_ML, KD, ML) plans")
    return (_reduces(plan_kdml, plan_kd, "KD", outputs, target, adapters, tol)
            and _reduces(plan_kdml, plan_ml, "ML", outputs, target, adapters, tol))
