"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The ablation criteria train 12 desk-scale models and take roughly half an
hour on one CPU core. Set SEGDOCTOR_ACCEPTANCE_OUT to keep their run
directories; otherwise they go to a pytest temp directory.
"""

import json
import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE, tiny_run
from oracles import autograd_grad, brute_reconstruct, central_fd_grad, centroid_objective, relative_error
from segdoctor.adapter import attach, default_taps, load_checkpoint, reference_unet
from segdoctor.category import category_loss, compute_centroids
from segdoctor.core import LabelMap, TreatmentConfig, one_hot
from segdoctor.diagnosis import decompose_errors
from segdoctor.metrics import confusion_matrix, iou_per_class, mean_iou
from segdoctor.superpixel import (
    SuperpixelGrid,
    build_head,
    normalize_associations,
    reconstruct,
    superpixel_loss,
    superpixel_treatment,
)
from segdoctor.training import DataSpec, RunConfig, ablate, check_recombination, read_metrics, total_loss, train

MODES = ("softmax-9", "sigmoid-renorm")
SEEDS = (0, 1, 2)


def _record(number, title, passed, detail):
    ACCEPTANCE.append((number, title, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {number}. {title}: {detail}")
    assert passed, detail


def test_1_gradients_match_finite_differences():
    start = time.perf_counter()
    worst = {}

    def note(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        h, w, c = int(rng.integers(3, 7)), int(rng.integers(3, 7)), int(rng.integers(2, 5))
        labels = LabelMap(torch.tensor(rng.integers(0, 3, (1, h, w))), 3)

        feats = torch.tensor(rng.normal(size=(1, c, h, w)))
        fixed = compute_centroids(feats, labels)

        def sim_fixed(x):
            return category_loss(x, fixed, labels).value

        def sim_through_centroids(x):
            return category_loss(x, compute_centroids(x, labels, detach=False), labels).value

        for name, fn in (("sim", sim_fixed), ("sim+centroids", sim_through_centroids)):
            note(name, relative_error(autograd_grad(fn, feats), central_fd_grad(fn, feats)))

        grid = SuperpixelGrid(h, w, 2)
        f, valid = one_hot(labels, torch.float64)
        v = grid.coords(torch.float64)
        logits = torch.tensor(rng.normal(scale=2.0, size=(1, 9, h, w)))
        for mode in MODES:
            def sp_logits(x, mode=mode):
                v_rec, f_rec = reconstruct(normalize_associations(x, mode), grid, f, v, valid)
                return superpixel_loss(f, f_rec, v, v_rec, 0.5, 2, valid).value

            note(f"sp/logits/{mode}", relative_error(autograd_grad(sp_logits, logits), central_fd_grad(sp_logits, logits)))

        head = build_head(c, hidden=4, seed=seed).double()
        for shallow_hw in ((h, w), (max(h // 2, 1), max(w // 2, 1))):
            shallow = torch.tensor(rng.normal(size=(2, c) + shallow_hw))
            two = LabelMap(torch.tensor(rng.integers(0, 3, (2, h, w))), 3)

            def sp_head(x):
                return superpixel_treatment(head, x, two, s=2, m=0.5).value

            note("sp/head-input", relative_error(autograd_grad(sp_head, shallow), central_fd_grad(sp_head, shallow)))

    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    _record(1, "gradients vs central differences (rel <= 1e-4, < 2 min)", ok, detail)


def test_2_reconstruction_matches_brute_force():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        h, w = (int(v) for v in rng.integers(1, 13, 2))
        s = int(rng.choice([2, 3, 4]))
        mode = MODES[i % 2]
        k = int(rng.integers(2, 5))
        grid = SuperpixelGrid(h, w, s)
        assoc = normalize_associations(torch.tensor(rng.normal(scale=2.0, size=(1, 9, h, w))), mode)
        raw = rng.integers(0, k, (1, h, w))
        raw[rng.random((1, h, w)) < 0.15] = 255
        f, valid = one_hot(LabelMap(torch.tensor(raw), k), torch.float64)
        v = grid.coords(torch.float64)
        v_rec, f_rec = reconstruct(assoc, grid, f, v, valid)
        p = assoc[0].numpy()
        f_ref = brute_reconstruct(p, s, f[0].numpy(), valid[0].numpy().astype(np.float64))
        v_ref = brute_reconstruct(p, s, v.numpy())
        worst = max(worst, np.abs(f_rec[0].numpy() - f_ref).max(), np.abs(v_rec[0].numpy() - v_ref).max())
    elapsed = time.perf_counter() - start
    _record(2, "two-pass reconstruction vs loop oracle (<= 1e-6, < 1 min)", worst <= 1e-6 and elapsed < 60,
            f"max abs diff {worst:.1e} over 50 instances; {elapsed:.1f}s")


def test_3_centroids_minimise_squared_distance():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    violations = 0
    checked = 0
    for _ in range(100):
        c = int(rng.integers(1, 6))
        h, w = (int(v) for v in rng.integers(1, 7, 2))
        k = int(rng.integers(2, 5))
        feats = torch.tensor(rng.normal(scale=rng.choice([0.1, 1.0, 10.0]), size=(1, c, h, w)))
        raw = rng.integers(0, k, (1, h, w))
        raw[0, 0, 0] = 0
        cents = compute_centroids(feats, LabelMap(torch.tensor(raw), k))
        rows = feats[0].reshape(c, -1).T.numpy()
        cls = raw.reshape(-1)

        def objective(centers):
            return sum(centroid_objective(rows[cls == j], centers[j]) for j in range(k) if (cls == j).any())

        centers = cents.centers.numpy()
        best = objective(centers)
        for _ in range(100):
            delta = rng.normal(size=centers.shape) * rng.choice([1e-4, 1e-2, 1.0])
            checked += 1
            violations += objective(centers + delta) < best
    elapsed = time.perf_counter() - start
    _record(3, "centroid optimality under 100x100 perturbations (< 1 min)", violations == 0 and elapsed < 60,
            f"{violations} violations in {checked} perturbations; {elapsed:.1f}s")


def test_4_invariant_suite():
    rng = np.random.default_rng(11)
    failures = []
    for i in range(30):
        h, w = (int(v) for v in rng.integers(2, 10, 2))
        s = int(rng.integers(1, 5))
        mode = MODES[i % 2]
        logits = torch.tensor(rng.normal(scale=3.0, size=(2, 9, h, w)))
        assoc = normalize_associations(logits, mode)
        if not torch.allclose(assoc.sum(1), torch.ones(2, h, w, dtype=torch.float64), atol=1e-6) or (assoc < 0).any():
            failures.append("association rows")
        labels = LabelMap(torch.tensor(rng.integers(0, 3, (2, h, w))), 3)
        grid = SuperpixelGrid(h, w, s)
        f, valid = one_hot(labels, torch.float64)
        v = grid.coords(torch.float64)
        v_rec, f_rec = reconstruct(assoc, grid, f, v, valid)
        if (f_rec < -1e-12).any() or not torch.allclose(f_rec.sum(1), torch.ones(2, h, w, dtype=torch.float64), atol=1e-6):
            failures.append("reconstructed labels outside the simplex")
        shift = torch.tensor(rng.normal(scale=20.0, size=(2, 1, 1)))
        v_shift, _ = reconstruct(assoc, grid, f, v + shift, valid)
        if not torch.allclose(v_shift - v_rec, shift.unsqueeze(0).expand_as(v_rec), atol=1e-9):
            failures.append("translation equivariance")

        feats = torch.tensor(rng.normal(size=(2, 4, h, w)))
        cents = compute_centroids(feats, labels)
        sim = float(category_loss(feats, cents, labels).value)
        if not 0.0 <= sim <= 2.0:
            failures.append("category loss range")
        scale = float(rng.uniform(0.01, 100.0))
        scaled = float(category_loss(feats * scale, compute_centroids(feats * scale, labels), labels).value)
        if abs(scaled - sim) > 1e-9:
            failures.append("cosine scale invariance")

        parts = rng.uniform(0, 10, 3)
        alpha, beta = rng.uniform(0, 2, 2)
        total = float(total_loss(*(torch.tensor(x, dtype=torch.float64) for x in parts), alpha, beta))
        if abs(total - (parts[0] + alpha * parts[1] + beta * parts[2])) > 1e-6:
            failures.append("loss recombination")

        gt = rng.integers(0, 3, (h, w))
        gt[rng.random((h, w)) < 0.1] = 255
        pred = rng.integers(0, 3, (h, w))
        prev = None
        for d in (1, 2, 3):
            t = decompose_errors(pred, gt, d, 3).totals
            if t["correct"] + t["boundary_error"] + t["category_error"] + t["ignored"] != h * w:
                failures.append("error partition")
            if prev is not None and t["boundary_error"] < prev:
                failures.append("monotonicity in band width")
            prev = t["boundary_error"]
    _record(4, "invariant suite", not failures, "all held over 30 random instances" if not failures else
            ", ".join(sorted(set(failures))))


def _ablation_config(out_dir):
    # s=4 keeps a 16x16 superpixel grid on 64x64 images
    return RunConfig(
        treatment=TreatmentConfig(s=4),
        data=DataSpec(num_train=200, num_val=50, size=(64, 64), num_classes=3, seed=0),
        epochs=20,
        out_dir=str(out_dir),
        band=2,
    )


@pytest.fixture(scope="session")
def ablation(tmp_path_factory):
    root = os.environ.get("SEGDOCTOR_ACCEPTANCE_OUT")
    out = Path(root) if root else tmp_path_factory.mktemp("ablation")
    payload = ablate(_ablation_config(out), SEEDS, out)
    print((out / "ablation.md").read_text())
    return out, payload


@pytest.mark.slow
def test_5_ablation_descent(ablation):
    _, payload = ablation
    problems = []
    for name, res in payload["variants"].items():
        minutes = sum(r["wall_seconds"] for r in res["runs"]) / 60
        if minutes >= 15:
            problems.append(f"{name} took {minutes:.1f} min")
        for run in res["runs"]:
            if not run["final_loss"] < run["initial_loss"]:
                problems.append(f"{name} seed {run['seed']} did not descend")
            for record in read_metrics(Path(run["out_dir"]) / "metrics.jsonl"):
                try:
                    check_recombination(record)
                except ArithmeticError as e:
                    problems.append(str(e))
    summary = "; ".join(
        f"{name} {np.mean([r['initial_loss'] for r in res['runs']]):.3f}->"
        f"{np.mean([r['final_loss'] for r in res['runs']]):.3f} "
        f"({sum(r['wall_seconds'] for r in res['runs']) / 60:.1f} min)"
        for name, res in payload["variants"].items()
    )
    _record(5, "ablation descent and recombination", not problems, "; ".join(problems) or summary)


@pytest.mark.slow
def test_6_directional_effect(ablation):
    _, payload = ablation
    v = payload["variants"]
    base_miou, both_miou = v["baseline"]["mean_miou"], v["+category&boundary"]["mean_miou"]
    base_bf, bnd_bf = v["baseline"]["mean_boundary_f"], v["+boundary"]["mean_boundary_f"]
    ok = both_miou >= base_miou - 0.005 and bnd_bf >= base_bf - 0.01
    direction = "improved" if both_miou >= base_miou and bnd_bf >= base_bf else "did not improve on every axis"
    detail = (f"mIoU both {100 * both_miou:.2f} vs baseline {100 * base_miou:.2f}; "
              f"boundary-F +boundary {bnd_bf:.4f} vs baseline {base_bf:.4f}; treatment {direction}")
    _record(6, "directional treatment effect within floor tolerances", ok, detail)


def test_7_determinism(tmp_path):
    a = train(tiny_run(tmp_path / "a", epochs=2))
    b = train(tiny_run(tmp_path / "b", epochs=2))
    same_files = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()

    base = train(tiny_run(tmp_path / "base", epochs=2, enable_category=False, enable_boundary=False))
    zero = train(tiny_run(tmp_path / "zero", epochs=2, treatment={"alpha": 0.0, "beta": 0.0}))
    mb, _, _ = load_checkpoint(tmp_path / "base" / "last.pt")
    mz, _, _ = load_checkpoint(tmp_path / "zero" / "last.pt")
    same_weights = all(torch.equal(x, y) for x, y in zip(mb.state_dict().values(), mz.state_dict().values()))
    same_curves = all(
        rb["train"]["total"] == rz["train"]["total"] and rb["train"]["ce"] == rz["train"]["ce"] and rb["val"] == rz["val"]
        for rb, rz in zip(base.loss_curve, zero.loss_curve)
    )
    ok = same_files and same_weights and same_curves and a.miou == b.miou
    _record(7, "determinism", ok, f"identical metrics files {same_files}; baseline equals zero-weight run "
            f"(weights {same_weights}, losses and val metrics {same_curves})")


def test_8_transparency_and_miou_units():
    model = reference_unet(3, seed=3)
    model.eval()
    x = torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        plain = model(x)
        handle = attach(model, default_taps(model))
        tapped, _ = handle(x)
        handle.detach_hooks()
    gt = np.array([[0, 0], [1, 1]])
    perfect = mean_iou(confusion_matrix(gt, gt, 2))
    cm = confusion_matrix(np.zeros((2, 2), dtype=np.int64), gt, 2)
    iou = iou_per_class(cm)
    hand = math.isclose(iou[0], 0.5) and iou[1] == 0.0 and math.isclose(mean_iou(cm), 0.25)
    ok = torch.equal(plain, tapped) and perfect == 1.0 and hand
    _record(8, "tapping transparency and mIoU unit cases", ok,
            f"logits identical {torch.equal(plain, tapped)}; perfect {perfect}; hand case {json.dumps(iou.tolist())}")
