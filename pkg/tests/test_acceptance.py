"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line
(collected in the terminal summary under "acceptance criteria").

Trained models are shared across criteria through module-scoped fixtures:
five clean models (seeds 0-4) and three EroSeg3 adversarially trained models
(seeds 0-2), all at the pinned desk-scale configuration.
"""

import os
import subprocess
import sys
import time
from statistics import mean

import mpmath
import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from eroseg import attacks as A
from eroseg import gradsuite, metrics
from eroseg import numerics as nx
from eroseg.data import generate
from eroseg.model import init_model
from eroseg.training import TrainConfig, adv_train, evaluate_clean, evaluate_under_attack, train_clean

SEEDS = range(5)
AT_SEEDS = range(3)
TRAIN_N, VAL_N, HW = 256, 64, 32
EPS = 8 / 255
ATTACK = A.AttackConfig(epsilon=EPS, alpha=2 / 255, iters=10)


def verdict(label, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    print(ACCEPTANCE_LINES[-1])
    assert ok, detail


def splits(seed):
    return generate(100 + seed, TRAIN_N, HW, HW), generate(200 + seed, VAL_N, HW, HW, split="val")


def robust(model, val, seed, attack="eroseg", **changes):
    return evaluate_under_attack(model, val, ATTACK.replace(seed=seed, **changes), attack=attack)[0]


@pytest.fixture(scope="module")
def standard():
    """seed -> (model, val split, clean val mIoU)."""
    out = {}
    for s in SEEDS:
        train, val = splits(s)
        model, _ = train_clean(train, TrainConfig(seed=s))
        out[s] = (model, val, evaluate_clean(model, val))
    return out


@pytest.fixture(scope="module")
def robust_models():
    out = {}
    for s in AT_SEEDS:
        train, val = splits(s)
        model, _ = adv_train(train, TrainConfig(seed=s, attack="eroseg"))
        out[s] = (model, val, evaluate_clean(model, val))
    return out


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    report = gradsuite.run(instances=100, seed=2024)
    took = time.perf_counter() - start
    worst = max(report.values())
    verdict("criterion  1 gradient suite", worst < 1e-6 and took < 60,
            f"max rel err {worst:.2e} over 100 instances x {len(report)} cases in {took:.1f}s")


def test_criterion_2_schedule():
    mpmath.mp.dps = 50
    t1 = A.tau_schedule(0.8, 0.8, 1)
    exact = 1 - mpmath.mpf("0.2") * mpmath.exp(mpmath.mpf("-0.8"))
    taus = [A.tau_schedule(0.8, 0.8, t) for t in range(1001)]
    ok = (A.tau_schedule(0.8, 0.8, 0) == 0.8 and float(A.tau_schedule(0.8, 0.8, 0)) == 0.8
          and abs(t1 - 0.91013421) <= 1e-8 and abs(t1 - float(exact)) < 1e-15
          and all(b > a for a, b in zip(taus, taus[1:])) and all(t < 1 for t in taus))
    verdict("criterion  2 schedule", ok, f"tau_0={float(taus[0])!r} tau_1={float(t1)!r}, strict and < 1 to t=1000")


def test_criterion_3_constraint_invariant():
    rng = np.random.default_rng(7)
    worst, outside, steps = 0.0, 0, 0
    modes = A.MASK_MODES
    k = 0
    while steps < 1000:
        model = init_model(k, 4)
        x = rng.random((2, 3, 16, 16))
        x[:, :, :3] = rng.integers(0, 2, (2, 3, 3, 16))       # saturated rows
        y = rng.integers(0, 4, (2, 16, 16))
        cfg = A.AttackConfig(epsilon=EPS, alpha=float(rng.choice([0.001, 2 / 255, 4 / 255, 0.05])),
                             iters=int(rng.integers(5, 25)), init=["zero", "uniform"][k % 2],
                             mask_mode=modes[k % len(modes)], seed=k)
        attack = A.pgd_attack if k % 3 == 0 else A.eroseg_attack

        def check(t, adv):
            nonlocal worst, outside, steps
            worst = max(worst, float(np.abs(adv - x).max()))
            outside += int((adv < 0).sum() + (adv > 1).sum())
            steps += 1

        attack(model, x, y, cfg, on_step=check)
        k += 1
    verdict("criterion  3 constraint invariant", worst <= EPS + 1e-12 and outside == 0,
            f"{steps} iterations over {k} runs, max |delta| - eps = {worst - EPS:.2e}, {outside} pixels outside [0,1]")


def _enum_miou(preds, labels, c):
    ious = []
    for k in range(c):
        p = {i for i, v in enumerate(preds.ravel()) if v == k}
        g = {i for i, v in enumerate(labels.ravel()) if v == k}
        if p | g:
            ious.append(len(p & g) / len(p | g))
    return sum(ious) / len(ious)


def test_criterion_4_oracles():
    rng = np.random.default_rng(4)
    bad = {name: 0 for name in ("pixel_confidence", "predict", "sensitive_mask", "class_weights",
                                "confusion", "miou")}
    for _ in range(1000):
        c = int(rng.integers(2, 5))
        p = rng.random((1, c, 4, 4))
        p /= p.sum(axis=1, keepdims=True)
        if rng.random() < 0.3:
            p[0, c - 1] = p[0, 0]                        # ties
        labels = rng.integers(0, c, (1, 4, 4))
        tau, lam = float(rng.random()), float(rng.random())
        conf = np.empty((1, 4, 4))
        pred = np.empty((1, 4, 4), dtype=np.int64)
        mask = np.empty((1, 4, 4))
        weights = np.empty((1, 4, 4))
        cm = np.zeros((c, c), dtype=np.int64)
        for i in range(4):
            for j in range(4):
                column = [p[0, k, i, j] for k in range(c)]
                conf[0, i, j] = max(column)
                pred[0, i, j] = column.index(max(column))
                mask[0, i, j] = 1.0 if column[pred[0, i, j]] < tau and pred[0, i, j] == labels[0, i, j] else 0.0
                weights[0, i, j] = lam if labels[0, i, j] != 0 else 1 - lam
                cm[labels[0, i, j], pred[0, i, j]] += 1
        got_conf, got_pred = A.pixel_confidence(p), A.predict(p)
        bad["pixel_confidence"] += not np.array_equal(got_conf, conf)
        bad["predict"] += not np.array_equal(got_pred, pred)
        bad["sensitive_mask"] += not np.array_equal(A.sensitive_mask(got_conf, got_pred, labels, tau), mask)
        bad["class_weights"] += not np.array_equal(A.class_weights(labels, lam), weights)
        got_cm = metrics.accumulate(got_pred, labels, c)
        bad["confusion"] += not np.array_equal(got_cm, cm)
        bad["miou"] += metrics.miou(got_cm) != _enum_miou(pred, labels, c)
    verdict("criterion  4 oracle equivalence", not any(bad.values()), f"mismatches over 1000 instances: {bad}")


def test_criterion_5_loss_identity():
    rng = np.random.default_rng(5)
    worst, leaked = 0.0, 0
    for _ in range(100):
        n, c, h, w = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(2, 6))
        z = rng.normal(size=(n, c, h, w)) * 2
        y = rng.integers(0, c, (n, h, w))
        full = A.eroseg_loss(z, y, np.ones(y.shape), A.class_weights(y, 0.5)).item()
        worst = max(worst, abs(full - 0.5 * A.mean_cross_entropy(z, y).item()))
        logits = nx.Tensor(z, requires_grad=True)
        mask = (rng.random(y.shape) < 0.5).astype(float)
        A.eroseg_loss(logits, y, mask, A.class_weights(y, float(rng.random()))).backward()
        leaked += int(np.count_nonzero(logits.grad.transpose(1, 0, 2, 3)[:, mask == 0]))
    verdict("criterion  5 loss identity", worst <= 1e-12 and leaked == 0,
            f"max |L - CE/2| = {worst:.1e}; {leaked} nonzero gradient entries at masked-out pixels")


def test_criterion_6_attack_effectiveness(standard):
    start = time.perf_counter()
    clean = [standard[s][2] for s in SEEDS]
    ero = [robust(standard[s][0], standard[s][1], s, "eroseg") for s in SEEDS]
    pgd = [robust(standard[s][0], standard[s][1], s, "pgd") for s in SEEDS]
    ok = min(clean) >= 0.85 and mean(ero) < 0.5 * mean(clean) and mean(ero) <= mean(pgd) + 0.02
    verdict("criterion  6 attack effectiveness", ok,
            f"clean {mean(clean):.3f} (min {min(clean):.3f}), EroSeg {mean(ero):.3f}, PGD {mean(pgd):.3f} "
            f"over 5 seeds; attack time {time.perf_counter() - start:.0f}s")


def test_criterion_7_adversarial_training(standard, robust_models):
    std_pgd = [robust(standard[s][0], standard[s][1], s, "pgd") for s in AT_SEEDS]
    at_pgd = [robust(robust_models[s][0], robust_models[s][1], s, "pgd") for s in AT_SEEDS]
    std_clean = mean(standard[s][2] for s in AT_SEEDS)
    at_clean = mean(robust_models[s][2] for s in AT_SEEDS)
    gain = mean(at_pgd) - mean(std_pgd)
    verdict("criterion  7 adversarial training", gain >= 0.10 and at_clean <= std_clean,
            f"PGD10 mIoU standard {mean(std_pgd):.3f} vs EroSeg3-AT {mean(at_pgd):.3f} (gain {100 * gain:+.1f} "
            f"points, need +10); clean standard {std_clean:.3f} vs AT {at_clean:.3f}")


def test_criterion_8_motivation_modes(standard):
    res = {mode: mean(robust(standard[s][0], standard[s][1], s, "eroseg", mask_mode=mode) for s in SEEDS)
           for mode in ("foreground", "background", "conf-lt-1", "conf-eq-1")}
    ok = res["foreground"] < res["background"] and res["conf-lt-1"] < res["conf-eq-1"]
    verdict("criterion  8 mask-mode directions", ok, ", ".join(f"{k} {v:.3f}" for k, v in res.items()))


def _cli(*args):
    env = dict(os.environ, EROSEG_THREADS="0")
    proc = subprocess.run([sys.executable, "-m", "eroseg.cli", *map(str, args)], env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def _tree(directory):
    return {name: (directory / name).read_bytes() for name in sorted(os.listdir(directory))}


def test_criterion_9_determinism(tmp_path):
    first, second = tmp_path / "first", tmp_path / "second"
    _cli("gen-data", "--seed", 11, "--n", 24, "--hw", 16, "--out", first / "data")
    _cli("train", "--data", first / "data", "--epochs", 2, "--batch-size", 8, "--out", first / "train")
    _cli("adv-train", "--data", first / "data", "--epochs", 1, "--batch-size", 8, "--iters", 2,
         "--out", first / "adv")
    _cli("eval", "--checkpoint", first / "train" / "checkpoint.sgm", "--data", first / "data",
         "--iters", 4, "--alpha", "2/255", "--out", first / "eval")
    for step in ("data", "train", "adv", "eval"):
        _cli(*[line.split("=", 1)[1] for line in (first / step / "config.txt").read_text().splitlines()[:1]],
             "--config", first / step / "config.txt", "--out", second / step)
    diffs = [f"{step}/{name}" for step in ("data", "train", "adv", "eval")
             for name, blob in _tree(first / step).items()
             if _tree(second / step).get(name) != blob]
    count = sum(len(_tree(first / step)) for step in ("data", "train", "adv", "eval"))
    verdict("criterion  9 determinism", not diffs, f"{count} files compared, differing: {diffs or 'none'}")


# ---- end-to-end examples attached to individual operations ------------------

def test_example_pgd_reduces_miou(standard):
    vals = [(robust(standard[s][0], standard[s][1], s, "pgd"), standard[s][2]) for s in SEEDS[:1]]
    verdict("example pgd below clean", all(r < c for r, c in vals), f"PGD10 {vals[0][0]:.3f} vs clean {vals[0][1]:.3f}")


def test_example_long_attack_not_weaker(standard):
    model, val, _ = standard[0]
    t3, t50 = robust(model, val, 0, iters=3), robust(model, val, 0, iters=50)
    verdict("example T=50 vs T=3", t50 <= t3 + 0.02, f"EroSeg T=3 {t3:.3f}, T=50 {t50:.3f}")


def test_example_iteration_sweep(standard):
    model, val, _ = standard[0]
    curve = [robust(model, val, 0, iters=n) for n in (1, 3, 7, 10)]
    ok = all(b <= a + 0.01 for a, b in zip(curve, curve[1:]))
    verdict("example iters sweep", ok, "iters 1,3,7,10 -> " + ", ".join(f"{v:.3f}" for v in curve))


def test_example_mask_modes_default_step(standard):
    # same comparison at the default step size (alpha=0.001), where ten steps
    # use well under the epsilon budget
    res = {mode: mean(robust(standard[s][0], standard[s][1], s, "eroseg", mask_mode=mode, alpha=0.001)
                      for s in SEEDS)
           for mode in ("foreground", "background")}
    verdict("example mask modes at alpha=0.001", res["foreground"] < res["background"],
            ", ".join(f"{k} {v:.3f}" for k, v in res.items()))
