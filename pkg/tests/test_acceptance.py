"""Acceptance criteria, one test per criterion.

Every test records its outcome in ``conftest.ACCEPTANCE`` before asserting,
so the terminal summary prints one PASS/FAIL line per criterion.
"""
import io
import json
import time

import numpy as np
import pytest

from darkseg.bilateral import BilateralParams, cross_bilateral_align
from darkseg.config import load_config
from darkseg.core import IGNORE, ClassSet
from darkseg.curriculum import LABELED_SYNTHETIC, PSEUDO_REAL, load_plan_config, plan, run_plan
from darkseg.gps import GpsFix, match_nearest
from darkseg.io import pair_dirs, read_label_png, read_manifest, read_mask_png, read_soft, write_matches_csv
from darkseg.metrics import (SweepAccumulator, accumulate_confusion, default_grid, threshold_apply, uiou_curve,
                             verify_theorem1)
from darkseg.refine import FusionParams, alpha_map, fuse, fusion_weights, refine_guided

import oracles
import synth
from conftest import ACCEPTANCE
from test_curriculum import build_workspace, snapshot

SEED = 20191027


def classes(C, dynamic=()):
    return ClassSet(tuple(f"c{i}" for i in range(C)), dynamic)


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def test_criterion_01_reduction_to_standard_iou():
    rng = np.random.default_rng(SEED + 1)
    C = 19
    cs = classes(C)
    data = [synth.random_instance(rng, C=C, H=32, W=32) for _ in range(1000)]
    t0 = time.perf_counter()
    got = [uiou_curve([s], [g], [m], cs, theta_grid=[1.0 / C]).mean[0] for s, g, m in data]
    elapsed = time.perf_counter() - t0
    want = [oracles.miou_oracle([g], [s.argmax(axis=0)], C) for s, g, _ in data]
    mismatches = sum(a != b for a, b in zip(got, want))
    # the whole set as one dataset, through the default 101-point sweep
    acc = SweepAccumulator(cs)
    for s, g, m in data:
        acc.add_soft(g, m, s)
    pooled = acc.curve().mean[0] == oracles.miou_oracle([g for _, g, _ in data],
                                                        [s.argmax(axis=0) for s, _, _ in data], C)
    record(1, mismatches == 0 and pooled and elapsed < 30,
           f"{mismatches}/1000 per-instance mismatches, pooled equal={pooled}, {elapsed:.1f}s")


def test_criterion_02_conservation():
    rng = np.random.default_rng(SEED + 2)
    bad = 0
    checks = 0
    for _ in range(200):
        C = int(rng.integers(2, 20))
        cs = classes(C)
        soft, gt, mask = synth.random_instance(rng, C=C, H=16, W=16)
        grid = default_grid(C)
        base = accumulate_confusion(gt, mask, threshold_apply(soft, grid[0]), cs, theta=grid[0])
        ref = base.tp + base.fn
        acc = SweepAccumulator(cs, grid)
        acc.add_soft(gt, mask, soft)
        curve = acc.curve()
        for i, th in enumerate(grid):
            t = accumulate_confusion(gt, mask, threshold_apply(soft, th), cs, theta=th)
            s = curve.tallies(i)
            bad += int(np.any(t.tp + t.fn + t.ti + t.fi != ref)) + int(np.any(s.tp + s.fn + s.ti + s.fi != ref))
            checks += 2
    record(2, bad == 0, f"{bad} of {checks} (instance, theta) checks break conservation for some class")


def _theorem_runs(n=600):
    rng = np.random.default_rng(SEED + 3)
    witnessed = violations = zero = unexplained = 0
    for _ in range(n):
        soft, gt, mask, C = synth.theorem_instance(rng)
        r = verify_theorem1([soft], [gt], [mask], classes(C))
        assert r.separation_holds and r.witness.any()
        witnessed += len(r.inequality_verified)
        violations += len(r.violations)
        zero += len(r.zero_overlap)
        unexplained += len(r.unexplained_violations)
    return witnessed, violations, zero, unexplained


@pytest.mark.xfail(strict=True, reason="a witnessed class with no true positive and no true invalid has "
                                       "UIoU = IoU = 0, so the strict inequality cannot hold")
def test_criterion_03_theorem_literal():
    witnessed, violations, zero, unexplained = _theorem_runs()
    record(3, violations == 0,
           f"600 instances, {witnessed} witnessed classes, {violations} violations "
           f"({zero} with zero overlap, {unexplained} otherwise)")


def test_criterion_03_theorem_outside_zero_overlap():
    witnessed, violations, zero, unexplained = _theorem_runs()
    assert witnessed >= 500
    assert unexplained == 0
    assert violations == zero


def test_criterion_03_hypothesis_violations_make_no_claim():
    rng = np.random.default_rng(SEED + 33)
    for _ in range(200):
        soft, gt, mask, C = synth.theorem_instance(rng)
        cs = classes(C)
        labeled = gt != IGNORE
        conf = soft.max(axis=0)
        # no witness: every labeled invalid-region pixel predicted correctly
        pred = np.where(labeled & (mask == 1), gt, soft.argmax(axis=0)).astype(np.int64)
        r = verify_theorem1([synth.soft_with_conf(rng, pred, conf, C)], [gt], [mask], cs)
        assert not r.witness.any() and r.inequality_verified == {}
        # no separation: one valid-region pixel drops below the invalid-region confidences
        low = conf.copy()
        low[-1, -1] = 1.0 / C + (conf[mask == 1].min() - 1.0 / C) * 0.5
        r = verify_theorem1([synth.soft_with_conf(rng, soft.argmax(axis=0), low, C)], [gt], [mask], cs)
        assert not r.separation_holds and r.inequality_verified == {} and r.theta_eval is None


def test_criterion_04_tally_oracle():
    rng = np.random.default_rng(SEED + 4)
    bad = 0
    for _ in range(1000):
        C = int(rng.integers(2, 20))
        gt, mask, pred = synth.random_hard_instance(rng, C=C, H=16, W=16)
        t = accumulate_confusion(gt, mask, pred, classes(C))
        bad += int(not np.array_equal(t.as_rows().T, np.array(oracles.tally_oracle(gt, mask, pred, C))))
    record(4, bad == 0, f"{bad}/1000 instances differ from the per-pixel oracle")


def test_criterion_05_bilateral_oracle():
    rng = np.random.default_rng(SEED + 5)
    params = BilateralParams(sigma_s=2, sigma_r=10)
    worst = 0.0
    for _ in range(50):
        C = int(rng.integers(2, 6))
        soft = rng.dirichlet(np.ones(C), size=(9, 9)).transpose(2, 0, 1)
        lab = rng.uniform(size=(9, 9, 3)) * [100, 60, 60] - [0, 30, 30]
        got = cross_bilateral_align(soft, lab, params)
        worst = max(worst, float(np.abs(got - oracles.bilateral_oracle(soft, lab, 2, 10, params.radius)).max()))
    blur = 0.0
    for _ in range(10):
        soft = rng.dirichlet(np.ones(3), size=(11, 13)).transpose(2, 0, 1)
        lab = np.broadcast_to([55.0, -4.0, 12.0], (11, 13, 3))
        got = cross_bilateral_align(soft, lab, params)
        for c in range(3):
            blur = max(blur, float(np.abs(got[c] - oracles.gaussian_blur_oracle(soft[c], 2, params.radius)).max()))
    record(5, worst <= 1e-5 and blur <= 1e-6, f"max error {worst:.2e} (bound 1e-5), blur {blur:.2e} (bound 1e-6)")


def test_criterion_06_fusion_contracts():
    rng = np.random.default_rng(SEED + 6)
    C = 19
    dark = rng.dirichlet(np.full(C, 0.3), size=(100, 1000)).transpose(2, 0, 1)
    day = rng.dirichlet(np.full(C, 0.3), size=(100, 1000)).transpose(2, 0, 1)
    alpha = alpha_map(day, dark, classes(C, dynamic=range(11, 19)))
    out = fuse(dark, day, alpha)
    sum_err = float(np.abs(out.sum(axis=0) - 1).max())
    in_bounds = bool(np.all(out >= np.minimum(dark, day)) and np.all(out <= np.maximum(dark, day)))
    wz, w1 = fusion_weights(0.8, 0.5, 0.6)
    werr = max(abs(float(wz) - 8 / 11), abs(float(w1) - 3 / 11))
    record(6, sum_err <= 1e-6 and in_bounds and werr <= 1e-12,
           f"sum error {sum_err:.1e}, within bounds={in_bounds}, worked weights error {werr:.1e}")


def _alpha_rule(day_dyn, dark_dyn, opposing_low, p=FusionParams()):
    return p.alpha_l if (day_dyn or dark_dyn) and opposing_low else p.alpha_h


def test_criterion_07_alpha_truth_table():
    # classes 0, 1 static; 2, 3 dynamic
    cs = ClassSet(("s0", "s1", "d2", "d3"), {2, 3})
    rows = []
    for day_dyn in (False, True):
        for dark_dyn in (False, True):
            for low in (False, True):
                cd = 2 if day_dyn else 0
                ck = 3 if dark_dyn else 1
                # the opposing probability sits exactly on eta or just above it
                q = 0.2 if low else 0.25
                day = np.full(4, (0.4 - q) / 2)
                day[cd], day[ck] = 0.6, q
                dark = np.full(4, (0.4 - q) / 2)
                dark[ck], dark[cd] = 0.6, q
                got = float(alpha_map(day[:, None, None], dark[:, None, None], cs)[0, 0])
                rows.append((day_dyn, dark_dyn, low, got, _alpha_rule(day_dyn, dark_dyn, low)))
    wrong = [r for r in rows if r[3] != r[4]]
    record(7, not wrong and len(rows) == 8, f"{8 - len(wrong)}/8 combinations give the expected alpha")


def test_criterion_08_edge_restoration():
    dark, rgb, day = synth.offset_edge_scene(H=64, W=96, edge=48, offset=10)
    ref = refine_guided(dark, rgb, day, ClassSet(("a", "b"), ()), BilateralParams(sigma_s=20))
    edge = (ref.labels == 1).argmax(axis=1)
    frac = float(np.mean(np.abs(edge - 48) <= 1))
    record(8, frac >= 0.95, f"{100 * frac:.1f}% of rows within 1 px of the intensity edge (need 95%)")


def test_criterion_09_gps_matcher():
    rng = np.random.default_rng(SEED + 9)
    queries, refs = synth.gps_loop(rng, n_ref=2000, n_query=500)
    q = [(i, GpsFix(a, o)) for i, (a, o) in queries]
    r = [(i, GpsFix(a, o, t)) for i, (a, o, t) in refs]
    got = match_nearest(q, r, max_dist=50)
    want = oracles.match_oracle(queries, refs, 50)
    same_ids = [(m.query_id, m.day_id, m.matched) for m in got] == [(a, b, ok) for a, b, _, ok in want]
    dist_err = float(np.max(np.abs(np.array([m.distance_m for m in got]) - [w[2] for w in want])))
    texts = []
    for _ in range(2):
        buf = io.StringIO()
        write_matches_csv(match_nearest(q, r, max_dist=50), buf)
        texts.append(buf.getvalue())
    record(9, same_ids and dist_err < 1e-6 and texts[0] == texts[1],
           f"ids equal={same_ids}, max distance error {dist_err:.1e} m, repeat runs identical={texts[0] == texts[1]}")


def test_criterion_10_curriculum_smoke(tmp_path):
    cfg_path = build_workspace(tmp_path)
    domains, cfg = load_plan_config(cfg_path)
    steps = plan(domains, cfg)
    before = snapshot(tmp_path)
    run_plan(steps, cfg, dry_run=True)
    dry_clean = snapshot(tmp_path) == before
    reports = run_plan(steps, cfg)
    guided = [r.guided for r in reports]
    refined = [r.pixels_refined for r in reports]
    weights_ok = True
    for s in steps:
        man = read_manifest(s.train_manifest)
        syn = [x.loss_weight for x in man if x.origin == LABELED_SYNTHETIC]
        pseudo = [x.loss_weight for x in man if x.origin == PSEUDO_REAL]
        weights_ok &= bool(syn and pseudo) and set(syn) == {1.0} and set(pseudo) == {cfg.mu} and cfg.mu == 1.0
    ok = len(reports) == 2 and guided == [False, True] and refined[0] == 0 and refined[1] > 0
    ok = ok and weights_ok and dry_clean and all(r.status == "ok" for r in reports)
    record(10, ok, f"{len(reports)} steps, guided={guided}, pixels refined={refined}, mu=1 weights={weights_ok}, "
                   f"dry run untouched={dry_clean}")


def test_criterion_11_performance():
    rng = np.random.default_rng(SEED + 11)
    C, H, W = 19, 1080, 1920
    cs = classes(C)
    acc = SweepAccumulator(cs)
    spent = 0.0
    for _ in range(151):
        gt = rng.integers(0, C, (H, W), dtype=np.uint8)
        gt[rng.random((H, W), dtype=np.float32) < 0.1] = IGNORE
        mask = (rng.random((H, W), dtype=np.float32) < 0.2).astype(np.uint8)
        labels = rng.integers(0, C, (H, W), dtype=np.uint8)
        conf = rng.uniform(1.0 / C, 1.0, (H, W)).astype(np.float32)
        t0 = time.perf_counter()
        acc.add(gt, mask, labels, conf)
        spent += time.perf_counter() - t0
    t0 = time.perf_counter()
    curve = acc.curve()
    spent += time.perf_counter() - t0
    assert len(curve) == 101
    soft = rng.dirichlet(np.ones(C), size=(H, W)).astype(np.float32).transpose(2, 0, 1).copy()
    rgb = rng.integers(0, 256, (H, W, 3), dtype=np.uint8)
    # compile the kernels outside the timed call
    refine_guided(soft[:, :64, :64].copy(), rgb[:64, :64], soft[:, :64, :64].copy(), cs, BilateralParams(sigma_s=4))
    t0 = time.perf_counter()
    refine_guided(soft, rgb, soft, cs, BilateralParams(downsample_factor=4))
    refine_s = time.perf_counter() - t0
    record(11, spent < 120 and refine_s < 10,
           f"sweep over 151 1080p frames {spent:.1f}s (bound 120), 1080p refine {refine_s:.1f}s (bound 10)")


def test_criterion_12_fixture_max_uiou_exceeds_iou(data_dir):
    d = data_dir / "uiou"
    cs = load_config(d / "config.json").classes
    rows = pair_dirs((d / "gt", ".png"), (d / "masks", ".png"), (d / "soft", ".sftp"))
    gts, masks, softs = zip(*[(read_label_png(g), read_mask_png(m), read_soft(s)) for _, (g, m, s) in rows])
    curve = uiou_curve(softs, gts, masks, cs)
    expected = json.loads((d / "expected.json").read_text())
    theta, best = curve.best
    ok = best > curve.iou and abs(best - expected["max_uiou"]) < 1e-6 and abs(curve.iou - expected["iou"]) < 1e-6
    ok = ok and curve.iou == oracles.miou_oracle(gts, [s.argmax(axis=0) for s in softs], cs.num_classes)
    record(12, ok, f"mIoU {100 * curve.iou:.2f}, max mUIoU {100 * best:.2f} at theta {theta:.3f}")
