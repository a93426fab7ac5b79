"""Acceptance criteria 1-8; each test prints one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from spikealign import kernels
from spikealign.config import Config
from spikealign.distill import cosine_align_loss, lr_at, pretrain
from spikealign.encoders import DualEncoder, params_digest, vocab_from_store
from spikealign.energy import ecr
from spikealign.finetune import (LabelSet, ce_loss, evaluate, finetune, finetune_loss, kl_loss,
                                 robustness_suite)
from spikealign.gradcheck import STEP, TOLERANCE, run_suite
from spikealign.lif import BINARITY, LifParams, lif_scan
from spikealign.synthetic import DESK_CONFIG, make_desk_data
from spikealign.tensor import Tensor

ENERGY_TABLE = [(27.26, 78.66), (28.98, 77.31), (29.30, 77.06), (27.97, 78.10), (27.93, 78.13), (27.56, 78.42)]


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


@pytest.fixture(scope="module", autouse=True)
def binarity():
    BINARITY.reset()
    yield BINARITY


@pytest.fixture(scope="module")
def desk_run():
    data = make_desk_data(n_train=60, n_test=30, seed=0)
    tokens, vectors = vocab_from_store(data.words)
    cfg = Config(DESK_CONFIG)
    model = DualEncoder(cfg, tokens, vectors)
    t0 = time.perf_counter()
    history = pretrain(model, [(i, img) for i, img, _ in data.train], data.prompts(),
                       data.image_teacher, data.text_teacher, cfg)
    labelset = LabelSet(data.labels, cfg["eval.prompt"])
    text_before = params_digest(model.text_params())
    ft = finetune(model, data.train, labelset, data.probs_teacher, cfg, eval_set=data.train)
    text_after = params_digest(model.text_params())
    return {"data": data, "model": model, "pretrain": history, "finetune": ft, "labelset": labelset,
            "text_digests": (text_before, text_after), "elapsed": time.perf_counter() - t0}


def oracle(currents, beta, thr):
    u = s = 0.0
    us, ss = [], []
    for i in currents:
        u = i + beta * u - s * thr
        s = 1.0 if u >= thr else 0.0
        us.append(u)
        ss.append(s)
    return us, ss


def test_criterion_1_energy_table(capsys):
    t0 = time.perf_counter()
    errs = [abs(100 * ecr(4, g / 100) - printed) for g, printed in ENERGY_TABLE]
    elapsed = time.perf_counter() - t0
    report(capsys, 1, max(errs) <= 0.05 and elapsed < 1,
           f"max |ECR - table| = {max(errs):.4f} pp over {len(errs)} rows (tol 0.05), {elapsed * 1e3:.2f} ms")


def test_criterion_2_lr_anchors(capsys):
    checks = [lr_at(0) == 5e-3, lr_at(50) == 5e-4, all(lr_at(t) == 5e-4 for t in (51, 75, 200)),
              abs(lr_at(25) - 2.75e-3) <= 1e-12]
    report(capsys, 2, all(checks), f"lr(0)={lr_at(0)!r} lr(25)={lr_at(25)!r} lr(50)={lr_at(50)!r} lr(51)={lr_at(51)!r}")


def test_criterion_3_lif_oracle(capsys):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        steps, n = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        beta, thr = float(rng.uniform(0, 1)), float(rng.uniform(0.05, 2))
        current = rng.normal(0.5, 1.0, (steps, n))
        trace = {}
        lif_scan(Tensor(current, dtype=np.float64), LifParams(thr, beta), trace=trace)
        for j in range(n):
            us, ss = oracle(current[:, j].tolist(), beta, thr)
            if trace["u"][:, j].tolist() != us or trace["s"][:, j].tolist() != ss:
                mismatches += 1
    elapsed = time.perf_counter() - t0
    report(capsys, 3, mismatches == 0 and elapsed < 5,
           f"{mismatches} mismatching neurons in 1000 instances on the {kernels.BACKEND} kernel, {elapsed:.2f} s")


def test_criterion_4_gradients(capsys):
    t0 = time.perf_counter()
    results = run_suite(0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.rel_err)
    failed = [r.name for r in results if not r.passed]
    report(capsys, 4, not failed and elapsed < 30,
           f"{len(results)} cases at h={STEP:g}, worst {worst.name} rel err {worst.rel_err:.2e} "
           f"(tol {TOLERANCE:g}), failed {failed}, {elapsed:.2f} s")


def test_criterion_5_loss_algebra(capsys):
    def cos(a, b):
        return cosine_align_loss(Tensor([a], dtype=np.float64), [b]).item()

    rng = np.random.default_rng(5)
    e = np.exp(rng.normal(size=(4, 3)))
    h, y = e / e.sum(1, keepdims=True), np.exp(rng.normal(size=(4, 3)))
    y = Tensor(y / y.sum(1, keepdims=True), dtype=np.float64)
    t = np.eye(3)[[0, 1, 2, 1]]
    values = {
        "cos identical": (cos([1.0, 2.0], [1.0, 2.0]), 0.0, 1e-12),
        "cos orthogonal": (cos([1.0, 0.0], [0.0, 3.0]), 1.0, 1e-12),
        "cos antipodal": (cos([1.0, 2.0], [-2.0, -4.0]), 2.0, 1e-12),
        "ce uniform K=10": (ce_loss(Tensor(np.full((1, 10), 0.1)), np.eye(10)[[0]]).item(), math.log(10), 1e-6),
        "kl h=y": (kl_loss(h, Tensor(h, dtype=np.float64)).item(), 0.0, 0.0),
        "kl [1,0]||[.5,.5]": (kl_loss([[1.0, 0.0]], Tensor([[0.5, 0.5]])).item(), math.log(2), 1e-6),
        "L_FT lambda=0": (finetune_loss(y, t, h, 0.0).item(), kl_loss(h, y).item(), 1e-9),
        "L_FT teacher=student": (finetune_loss(y, t, y.data, 0.5).item(), 0.5 * ce_loss(y, t).item(), 1e-9),
    }
    bad = [k for k, (got, want, tol) in values.items() if abs(got - want) > tol]
    report(capsys, 5, not bad, f"{len(values)} identities checked, failing: {bad}")


def test_criterion_6_training_sanity(capsys, desk_run):
    ratios = {}
    for split in ("image", "text"):
        losses = [h["loss"] for h in desk_run["pretrain"] if h["split"] == split]
        ratios[split] = min(losses[:50]) / losses[0]
    train_acc = [h["eval_acc"] for h in desk_run["finetune"]][:100]
    ok = all(r < 0.2 for r in ratios.values()) and max(train_acc) >= 0.9 and desk_run["elapsed"] < 600
    report(capsys, 6, ok,
           f"distillation loss ratio image {ratios['image']:.4f} text {ratios['text']:.4f} (need < 0.2); "
           f"best train acc {max(train_acc):.3f} final {train_acc[-1]:.3f} (need >= 0.9); "
           f"{desk_run['elapsed']:.1f} s")


def test_criterion_7_freezing_and_robustness(capsys, desk_run):
    model, data, labelset = desk_run["model"], desk_run["data"], desk_run["labelset"]
    before, after = desk_run["text_digests"]
    pixels = model.prepare_images([img for _, img, _ in data.test])
    classes = [c for _, _, c in data.test]
    base = evaluate(model, pixels, classes, labelset)
    recs = robustness_suite(model, pixels, classes, labelset, expand=[1, 2, 3, 4], replace=[0, 20, 40, 80, 100],
                            distractors=data.distractors, substitutes=data.substitutes, seeds=[0, 1, 2])
    acc = {r["setting"]: r["accuracy"] for r in recs if r["seed"] in (None, 0)}
    expand = [acc[f"expand_x{n}"] for n in (1, 2, 3, 4)]
    summaries = [r for r in recs if r["seed"] == "summary"]
    checks = {
        "text frozen": before == after,
        "expand x1 = baseline": expand[0] == base,
        "expand non-increasing": all(a >= b for a, b in zip(expand, expand[1:])),
        "replace 0% = baseline": all(r["accuracy"] == base for r in recs if r["setting"] == "replace_0"),
        "replacement mean/variance": len(summaries) >= 3 and all(
            {"mean", "variance"} <= set(r) and r["runs"] == 3 for r in summaries),
    }
    bad = [k for k, v in checks.items() if not v]
    report(capsys, 7, not bad, f"baseline {base:.3f}, expand x1..x4 {[round(a, 3) for a in expand]}, failing: {bad}")


def test_criterion_8_binarity(capsys, binarity, desk_run):
    report(capsys, 8, binarity.checks > 0 and binarity.violations == 0,
           f"{binarity.violations} violations in {binarity.checks} instrumented spike outputs")
