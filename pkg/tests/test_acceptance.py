"""Acceptance criteria 1-10.  Each test records one PASS/FAIL line, printed at the end of the run."""

import contextlib
import time

import numpy as np
import pytest

import conftest
from kdmix import autodiff as ad
from kdmix import cli, losses
from kdmix.autodiff import Tensor
from kdmix.data import split, synth_classification, synth_segmentation
from kdmix.evaluate import ensemble_classify, ensemble_mask, recall
from kdmix.experiment import read_csv
from kdmix.sharing import (
    CLASSIFICATION,
    CONFIGS,
    KD_ML,
    KD_OFF,
    KD_ON,
    ML,
    S1,
    S2,
    SEGMENTATION,
    STRATEGIES,
    T,
    Weights,
    build_cohort,
    build_plan,
    build_standalone_plan,
    derive_weights,
    reduction_check,
    student_objective,
    teacher_objective,
)
from kdmix.train import Splits, TrainSettings, mean_std, train_plan
from test_autodiff import BINARY, POSITIVE_ONLY, UNARY, away_from_zero
from test_losses import random_dist, ref_dice, ref_focal, ref_kl, ref_mse, t64
from test_sharing import EXPECTED_MATRIX, forward_all, make_batch, mirrored, reduction_setup

SEEDS = (0, 1, 2)
LR = 1e-3  # desk-scale learning rate, see README

# weights reported for the classification and segmentation tables
CLS_KDML_V3 = {S1: Weights(0.1, 0.45, 0.45), S2: Weights(0.4, 0.3, 0.3)}
CLS_ML_V1 = derive_weights(ML, 0.2, 0.2)
SEG_KDML_V3 = {S1: Weights(0.1, 0.45, 0.45), S2: Weights(0.1, 0.45, 0.45)}


@contextlib.contextmanager
def criterion(n, detail=""):
    """Record PASS/FAIL for criterion ``n``; ``detail`` may be a list to append to."""
    info = [detail] if isinstance(detail, str) else detail
    try:
        yield info
    except BaseException:
        conftest.ACCEPTANCE[n] = (False, " ".join(i for i in info if i))
        raise
    conftest.ACCEPTANCE[n] = (True, " ".join(i for i in info if i))


def test_c01_gradient_suite():
    with criterion(1) as info, ad.default_dtype(np.float64):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        worst, count, skipped = 0.0, 0, 0

        def check(f, inputs, name):
            # entries whose stencil straddles a relu/max-pool kink are redrawn, not excused
            nonlocal worst, count, skipped
            res = ad.gradcheck_stats(f, inputs, h=1e-4, n_points=10, rng=rng, skip_kinks=True)
            assert res.worst < 1e-3, (name, res)
            assert res.checked >= 10, (name, res)
            worst, count, skipped = max(worst, res.worst), count + 1, skipped + res.skipped

        for name, op in UNARY.items():
            x = (Tensor(rng.uniform(0.2, 2.0, size=(2, 3, 4, 4)), requires_grad=True)
                 if name in POSITIVE_ONLY else away_from_zero(rng, (2, 3, 4, 4)))
            w = Tensor(rng.normal(size=op(x).shape))
            check(lambda: ad.sum(ad.mul(op(x), w)), [x], name)
        for name, op in BINARY.items():
            a = Tensor(rng.uniform(-1, 1, size=(3, 4)), requires_grad=True)
            b = Tensor(rng.uniform(0.5, 1.5, size=(3, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(3, 4)))
            check(lambda: ad.sum(ad.mul(op(a, b), w)), [a, b], name)
        m1 = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        m2 = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
        check(lambda: ad.sum(ad.square(ad.matmul(m1, m2))), [m1, m2], "matmul")
        x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
        for stride, pad in ((1, 0), (1, 1), (2, 1)):
            k = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
            check(lambda: ad.sum(ad.square(ad.conv2d(x, k, stride, pad))), [x, k], f"conv s{stride} p{pad}")
        c1, c2 = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 1, 3, 3)), requires_grad=True)
        bias = Tensor(rng.normal(size=(3,)), requires_grad=True)
        wc = Tensor(rng.normal(size=(2, 3, 3, 3)))
        check(lambda: ad.sum(ad.mul(ad.add_bias(ad.concat_channels([c1, c2]), bias), wc)), [c1, c2, bias], "concat+bias")

        # loss building blocks
        z = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        y = rng.integers(0, 3, size=4)
        target = Tensor(random_dist(rng, (4, 3)))
        fa, fb = Tensor(rng.normal(size=(2, 3, 2, 2)), requires_grad=True), Tensor(rng.normal(size=(2, 3, 2, 2)))
        zl = Tensor(rng.normal(size=(2, 1, 4, 4)), requires_grad=True)
        g = (rng.random((2, 1, 4, 4)) < 0.4).astype(float)
        check(lambda: losses.cross_entropy(losses.softmax_t(z, 1.0), y), [z], "ce")
        check(lambda: losses.kl_div(target, losses.softmax_t(z, 2.0)), [z], "kl")
        check(lambda: losses.feature_mse(fa, fb), [fa], "mse")
        check(lambda: losses.focal_loss(ad.sigmoid(zl), g), [zl], "focal")
        check(lambda: losses.dice_loss(ad.sigmoid(zl), g), [zl], "dice")
        check(lambda: losses.fd_loss(ad.sigmoid(zl), g), [zl], "fd")

        # composite objectives of every configuration, both tasks
        for task in (CLASSIFICATION, SEGMENTATION):
            for config in CONFIGS:
                w = CLS_KDML_V3 if config == KD_ML else derive_weights(config, 0.3, 0.3)
                plan = build_plan(config, "V3", task, w)
                cohort = build_cohort(plan, (1, 8, 8), seed=2)
                xb, yb = make_batch(task, rng, b=2)
                for s in plan.students:
                    f = lambda s=s: student_objective(plan, s, forward_all(cohort, xb), yb, cohort.adapters)[0]  # noqa: E731
                    check(f, cohort.owned_parameters(s), f"{task} {config} {s}")
                if plan.teacher:
                    check(lambda: teacher_objective(plan, forward_all(cohort, xb), yb)[0],
                          cohort.nets[T].parameters(), f"{task} {config} T")
        elapsed = time.perf_counter() - t0
        info.append(f"{count} checks, worst rel err {worst:.2e}, {skipped} kink entries redrawn, {elapsed:.1f}s")
        assert elapsed < 60


def test_c02_loss_oracles():
    with criterion(2) as info:
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(100):
            b, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
            t, s = random_dist(rng, (b, c)), random_dist(rng, (b, c))
            fa, fb = rng.normal(size=(b, 2, 3, 3)), rng.normal(size=(b, 2, 3, 3))
            p = rng.uniform(0.01, 0.99, size=(b, 1, 4, 4))
            g = (rng.random(p.shape) < 0.3).astype(float)
            diffs = [
                losses.kl_div(t64(t), t64(s)).item() - ref_kl(t, s),
                losses.feature_mse(t64(fa), t64(fb)).item() - ref_mse(fa, fb),
                losses.focal_loss(t64(p), g, 2.0).item() - ref_focal(p, g, 2.0),
                losses.dice_loss(t64(p), g).item() - ref_dice(p, g),
            ]
            worst = max(worst, max(abs(d) for d in diffs))
        assert worst < 1e-6
        min_kl = min(losses.kl_div(t64(random_dist(rng, (1, c))), t64(random_dist(rng, (1, c)))).item()
                     for c in rng.integers(2, 6, size=1000))
        assert min_kl >= 0
        info.append(f"max |diff| {worst:.1e}, min KL {min_kl:.2e}")


def test_c03_reduction_identities():
    with criterion(3) as info:
        rng = np.random.default_rng(3)
        n = 0
        for task in (CLASSIFICATION, SEGMENTATION):
            for strategy in STRATEGIES:
                for seed in range(3):
                    a1, a2 = rng.uniform(0.05, 0.95, size=2)
                    kdml, cohort, out, y = reduction_setup(task, strategy, rng, a1, a2, seed=seed)
                    ml = build_plan(ML, strategy, task, mirrored(ML, a1, a2, strategy))
                    for kd_config in (KD_ON, KD_OFF):
                        kd = build_plan(kd_config, strategy, task, mirrored(kd_config, a1, a2, strategy))
                        assert reduction_check(kdml, kd, ml, out, y, cohort.adapters, tol=1e-9)
                        n += 1
        info.append(f"{n} random batches, tol 1e-9")


def test_c04_strategy_matrix():
    with criterion(4):
        for (config, strategy), expected in EXPECTED_MATRIX.items():
            w = CLS_KDML_V3 if config == KD_ML else derive_weights(config, 0.3, 0.3)
            assert build_plan(config, strategy, weights=w).channel_matrix() == expected
        assert len(EXPECTED_MATRIX) == 12


CONFIG = """
[task]
name = {task}
[plan]
config = {config}
strategy = {strategy}
[train]
seeds = {seeds}
epochs = 2
lr = 0.001
[data]
n = {n}
resolution = {res}
"""


def _cfg(tmp_path, name, **kw):
    p = tmp_path / name
    p.write_text(CONFIG.format(**kw))
    return p


def test_c05_determinism(tmp_path):
    with criterion(5) as info:
        compared = 0
        for task, res in ((CLASSIFICATION, 16), (SEGMENTATION, 16)):
            cfg = _cfg(tmp_path, f"{task}.ini", task=task, config="KD_ML", strategy="V3", seeds="0 1", n=40, res=res)
            dirs = []
            for tag in ("a", "b"):
                assert cli.main(["run", str(cfg), "--out", str(tmp_path / task / tag)]) == 0
                dirs.append(tmp_path / task / tag / "KD_ML-V3")
            for f in [p.relative_to(dirs[0]) for p in dirs[0].rglob("*") if p.is_file()]:
                if f.suffix in (".csv", ".ckpt"):
                    assert (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes(), f
                    compared += 1
        info.append(f"{compared} CSV/checkpoint files byte-identical")


def test_c06_freeze_contract(tmp_path):
    with criterion(6) as info:
        for task in (CLASSIFICATION, SEGMENTATION):
            for strategy in STRATEGIES:
                cfg = _cfg(tmp_path, "off.ini", task=task, config="KD_off", strategy=strategy, seeds="0", n=24, res=16)
                out = tmp_path / task / strategy
                assert cli.main(["run", str(cfg), "--out", str(out)]) == 0
                ck = out / f"KD_off-{strategy}" / "checkpoints" / "seed0"
                assert (ck / "teacher_phase1.ckpt").read_bytes() == (ck / "T.ckpt").read_bytes()
        info.append("teacher checkpoint unchanged by phase 2 (both tasks, V1-V3)")


def test_c07_ensemble_properties():
    with criterion(7):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            m1, m2 = rng.random((1, 1, 8, 8)), rng.random((1, 1, 8, 8))
            truth = rng.random((1, 1, 8, 8)) < rng.random()
            ens = ensemble_mask([m1, m2])
            for m in (m1, m2):
                assert np.all(ens[m >= 0.5])
                assert recall(ens, truth)[0] >= recall(m >= 0.5, truth)[0]
            c = int(rng.integers(2, 6))
            p1, p2 = rng.dirichlet(np.ones(c), size=4), rng.dirichlet(np.ones(c), size=4)
            np.testing.assert_array_equal(ensemble_classify([p1, p2]), ensemble_classify([p2, p1]))


def _trend(task, plans, n, res, epochs, metric):
    """3-seed ensemble means per plan label; standalone uses its single student."""
    make = synth_classification if task == CLASSIFICATION else synth_segmentation
    scores = {label: [] for label in plans}
    for seed in SEEDS:
        sp = Splits(*split(make(n, res, seed=seed), seed=seed))
        for label, plan in plans.items():
            rec = train_plan(plan, sp, TrainSettings(epochs=epochs, lr=LR), seed)
            scores[label].append(rec.metrics[S1][metric] if label == "standalone" else rec.ensemble[metric])
    return {label: mean_std(v) for label, v in scores.items()}, scores


def test_c08_classification_trend():
    with criterion(8) as info:
        t0 = time.perf_counter()
        plans = {
            "KD_ML-V3": build_plan(KD_ML, "V3", CLASSIFICATION, CLS_KDML_V3),
            "ML-V1": build_plan(ML, "V1", CLASSIFICATION, CLS_ML_V1),
            "standalone": build_standalone_plan(CLASSIFICATION),
        }
        stats, scores = _trend(CLASSIFICATION, plans, 2000, 16, 20, "accuracy")
        info.extend(f"{k} {m:.4f}+-{s:.4f}" for k, (m, s) in stats.items())
        info.append(f"({time.perf_counter() - t0:.0f}s)")
        kdml = stats["KD_ML-V3"][0]
        a, b = kdml >= stats["ML-V1"][0], kdml >= stats["standalone"][0]
        info.append(f"(a) {'ok' if a else 'violated'} (b) {'ok' if b else 'violated'}")
        assert a and b, scores


def test_c09_segmentation_trend():
    with criterion(9) as info:
        t0 = time.perf_counter()
        plans = {
            "KD_ML-V3": build_plan(KD_ML, "V3", SEGMENTATION, SEG_KDML_V3),
            "standalone": build_standalone_plan(SEGMENTATION),
        }
        stats, scores = _trend(SEGMENTATION, plans, 600, 32, 30, "IoU")
        info.extend(f"{k} IoU {m:.4f}+-{s:.4f}" for k, (m, s) in stats.items())
        info.append(f"({time.perf_counter() - t0:.0f}s)")
        assert stats["KD_ML-V3"][0] >= stats["standalone"][0], scores


def test_c10_sweep_completeness(tmp_path):
    with criterion(10) as info:
        cfg = _cfg(tmp_path, "sweep.ini", task=CLASSIFICATION, config="KD_ML", strategy="V3", seeds="0 1 2", n=40, res=16)
        assert cli.main(["sweep", str(cfg), "--out", str(tmp_path)]) == 0
        rows = read_csv(tmp_path / "sweep" / "summary.csv")
        models = sorted({(r["model"], r["strategy"]) for r in rows})
        assert models == sorted((c, s) for c in CONFIGS for s in STRATEGIES)
        for model in models:
            mine = [r for r in rows if (r["model"], r["strategy"]) == model]
            expected = {S1, S2, "Ensemble"} | ({T} if model[0] != ML else set())
            assert {r["network"] for r in mine} == expected
            assert all(r["seed_count"] == 3 and r["std"] >= 0 for r in mine)
            recs = (tmp_path / "sweep" / f"{model[0]}-{model[1]}" / "records.jsonl").read_text().splitlines()
            assert len(recs) == 3
        info.append(f"{len(models)} models, {len(rows)} rows")
