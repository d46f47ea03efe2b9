"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one ``criterion N: PASS/FAIL`` line (also collected in the
terminal summary) before asserting.
"""

import itertools
import math
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssvif import gdwa, losses as L, metrics as M
from ssvif.config import Config
from ssvif.diagnostics import projection_coefficient
from ssvif.imageio import load_dataset, luminance, save_pgm, save_ppm
from ssvif.losses import LossBreakdown
from ssvif.models import SegPrediction
from ssvif.synthgen import SceneSpec, generate
from ssvif.tensor import Tensor
from ssvif.trainer import Trainer, prepare_data, segment_pairs

import helpers
from conftest import random_pairs
from helpers import report

TOY_SEEDS = (7, 8, 9)
TOY_CONFIG = Config(
    out_dir="", n_classes=4, crop=32, lr=1e-4, batch_size=10, max_epochs=40,
    stage1_cap=20, patience=10, scheduler="gdwa", save_checkpoints=False,
)


def _t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def _check(criterion, detail_fn):
    """Run ``detail_fn`` (returns (ok, detail)); report and assert."""
    try:
        ok, detail = detail_fn()
    except Exception as exc:  # report crashes as failures too
        report(criterion, False, f"raised {type(exc).__name__}: {exc}")
        raise
    report(criterion, ok, detail)
    assert ok, detail


# -- 1 gradients --------------------------------------------------------------------

def test_criterion_1_gradient_correctness():
    def run():
        t0 = time.perf_counter()
        worst = {name: helpers.run_grad_case(name, 50) for name in helpers.GRAD_CASES}
        elapsed = time.perf_counter() - t0
        name = max(worst, key=worst.get)
        ok = worst[name] < 1e-4 and elapsed < 120
        return ok, f"{len(worst)} ops/losses x 50 instances, worst rel err {worst[name]:.2e} ({name}), {elapsed:.1f}s"
    _check(1, run)


# -- 2 loss oracles -----------------------------------------------------------------

def test_criterion_2_loss_oracles():
    def run():
        rng = np.random.default_rng(2024)
        worst = dict.fromkeys(("L_int", "L_grad", "L_color", "L_ce", "L_dice", "L_csc", "Q_abf"), 0.0)
        for _ in range(100):
            f, ir, vis = (rng.uniform(0, 1, (3, 8, 8)) for _ in range(3))
            fl, il, vl = f.tolist(), ir.tolist(), vis.tolist()
            y = [_t(luminance(x)) for x in (f, ir, vis)]
            got = {
                "L_int": L.intensity_loss(*y).item(),
                "L_grad": L.gradient_loss(*y).item(),
                "L_color": L.color_loss(_t(f), _t(vis)).item(),
            }
            want = {
                "L_int": helpers.naive_intensity_loss(fl, il, vl),
                "L_grad": helpers.naive_gradient_loss(fl, il, vl),
                "L_color": helpers.naive_color_loss(fl, vl),
            }
            pa, pb = helpers.random_probs(rng, 4, 8, 8), helpers.random_probs(rng, 4, 8, 8)
            labels = helpers.naive_labels(pa.tolist(), pb.tolist())
            l_csc, _, parts = L.csc_loss(SegPrediction.from_probs(_t(pa)), SegPrediction.from_probs(_t(pb)))
            got.update(L_ce=parts["l_ce_A"].item(), L_dice=parts["l_dice_A"].item(), L_csc=l_csc.item())
            want.update(
                L_ce=helpers.naive_ce(pa.tolist(), labels),
                L_dice=helpers.naive_dice(pa.tolist(), labels),
                L_csc=helpers.naive_csc(pa.tolist(), pb.tolist()),
            )
            g = [luminance(x)[0] for x in (f, ir, vis)]
            got["Q_abf"] = M.qabf(*g)
            want["Q_abf"] = helpers.naive_qabf(*(x.tolist() for x in g))
            for k in worst:
                worst[k] = max(worst[k], abs(got[k] - want[k]))
        ok = all(v <= 1e-6 for v in worst.values())
        return ok, "100 random 8x8 inputs, max abs diff " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    _check(2, run)


# -- 3 pseudo-labels ----------------------------------------------------------------

def test_criterion_3_pseudo_label_lattice():
    def run():
        grid = [k / 10 for k in range(11)]
        comp = {k / 10: (10 - k) / 10 for k in range(11)}
        combos = list(itertools.product(grid, repeat=4))
        pa = np.array([[[[a1, a2]], [[comp[a1], comp[a2]]]] for a1, a2, _, _ in combos])
        pb = np.array([[[[b1, b2]], [[comp[b1], comp[b2]]]] for _, _, b1, b2 in combos])
        pl = L.build_pseudo_label(pa, pb)
        mismatches = ties = 0
        for i in range(len(combos)):
            la, lb = pa[i].tolist(), pb[i].tolist()
            for x in range(2):
                cls, src = helpers.naive_pseudo_label(la, lb, 0, x)
                ties += max(la[0][0][x], la[1][0][x]) == max(lb[0][0][x], lb[1][0][x])
                mismatches += int(pl.classes[i, 0, x] != cls) + int(pl.source[i, 0, x] != src)
        return mismatches == 0, f"{len(combos)} lattice configurations x 2 pixels ({ties} ties), {mismatches} mismatches"
    _check(3, run)


# -- 4 GDWA -------------------------------------------------------------------------

norms = st.floats(1e-3, 1e3)
rates = st.floats(0.2, 3.0)
temps = st.floats(0.5, 10.0)
THOUSAND = settings(max_examples=1000, deadline=None, derandomize=True)


@THOUSAND
@given(norms, norms, rates, rates, temps)
def _normalisation(g_a, g_b, r_a, r_b, t):
    assert abs(sum(gdwa.normalized_norms(g_a, g_b)) - 1) <= 1e-9
    assert abs(sum(gdwa.descent_softmax(r_a, r_b, t)) - 1) <= 1e-9
    lam_a, lam_b, omega = gdwa.gdwa_weights(g_a, g_b, r_a, r_b, t)
    assert abs(lam_a + lam_b - 1) <= 1e-9 and 0 < lam_a < 1 and 0 < lam_b < 1
    assert abs(omega - lam_b / lam_a) <= 1e-9 * max(1.0, omega)
    assert gdwa.OMEGA_MIN <= gdwa.clamp_omega(omega) <= gdwa.OMEGA_MAX


@THOUSAND
@given(norms, norms, rates, rates, temps, st.floats(1.01, 10))
def _monotonicity(g_a, g_b, r_a, r_b, t, factor):
    base = gdwa.gdwa_weights(g_a, g_b, r_a, r_b, t)[1]
    if base < 1 - 1e-6:
        assert gdwa.gdwa_weights(g_a, g_b * factor, r_a, r_b, t)[1] > base
        assert gdwa.gdwa_weights(g_a, g_b, r_a, r_b + 0.05 * factor, t)[1] > base


@THOUSAND
@given(norms, norms, rates, rates, temps, st.floats(1e-3, 1e3))
def _scale_robustness(g_a, g_b, r_a, r_b, t, c):
    a = gdwa.gdwa_weights(g_a, g_b, r_a, r_b, t)
    b = gdwa.gdwa_weights(g_a * c, g_b * c, r_a, r_b, t)
    assert abs(a[0] - b[0]) <= 1e-9 and abs(a[2] - b[2]) <= 1e-9 * max(1.0, a[2])


def test_criterion_4_gdwa_arithmetic():
    def run():
        lam_a, _, omega = gdwa.gdwa_weights(3, 1, 1, 1, 2)
        example = abs(lam_a - 0.75) <= 1e-9 and abs(omega - 1 / 3) <= 1e-9
        failed = []
        for name, prop in (("normalisation", _normalisation), ("monotonicity", _monotonicity), ("scale", _scale_robustness)):
            try:
                prop()
            except AssertionError:
                failed.append(name)
        ok = example and not failed
        return ok, (f"worked example lambda_A={lam_a:.12f} omega={omega:.12f}; "
                    f"3 property suites x 1000 inputs, failing: {failed or 'none'}")
    _check(4, run)


# -- 5 stage switch -----------------------------------------------------------------

def _scripted_switch(sequence, cap):
    pairs = random_pairs(12, size=16, seed=5)
    cfg = replace(TOY_CONFIG, crop=16, stage1_cap=cap, max_epochs=len(sequence))
    t = Trainer(cfg, pairs[:10], pairs[10:])
    feed = iter(sequence)
    current = {}
    original = t.run_epoch

    def epoch():
        current["loss"] = next(feed)
        return original()

    t.run_epoch = epoch
    t.train_step_stage1 = lambda vis, ir: LossBreakdown(l_fusion=current["loss"], l_total=current["loss"])
    t.validate = lambda: (1.0, 1.0, math.nan)
    result = t.fit()
    return result.switch_epoch, [r.stage for r in result.records]


def test_criterion_5_stage_switch():
    def run():
        switch, stages = _scripted_switch([1.0, 0.8, 0.7, 0.75], 20)
        cap_switch, _ = _scripted_switch([1.0, 0.9, 0.8, 0.7, 0.6, 0.5], 5)
        ok = switch == 4 and stages == [1, 1, 1, 1] and cap_switch == 5
        return ok, f"[1.0, 0.8, 0.7, 0.75] switches after epoch {switch}; monotone with cap 5 switches after epoch {cap_switch}"
    _check(5, run)


# -- 6 end-to-end toy training --------------------------------------------------------

@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    spec = SceneSpec(n_classes=4, seed=7)
    generate(spec, 200, root / "train")
    generate(spec, 40, root / "test", start=200)
    test_pairs = load_dataset(root / "test")
    gt = np.stack([p.label for p in test_pairs])
    runs = {}
    t0 = time.perf_counter()
    for seed in TOY_SEEDS:
        cfg = replace(TOY_CONFIG, dataset_root=str(root / "train"), seed=seed)
        train_pairs, val_pairs = prepare_data(cfg)
        csc = Trainer(cfg, train_pairs, val_pairs)
        csc.fit(until_switch=True)
        # agreement of the untrained branches as Stage II begins (informational)
        entry_agreement = csc.validate()[2]
        ablation = csc.fork(replace(cfg, use_csc=False))
        with_csc = csc.fit()
        without = ablation.fit()
        runs[seed] = {
            "csc": with_csc,
            "entry_agreement": entry_agreement,
            "no_csc": without,
            "miou_csc": M.matched_miou(segment_pairs(csc.nets, test_pairs), gt, 4)[0],
            "miou_no_csc": M.matched_miou(segment_pairs(ablation.nets, test_pairs), gt, 4)[0],
        }
    runs["seconds"] = time.perf_counter() - t0
    return runs


def test_criterion_6_toy_training(toy_runs):
    def run():
        parts = []
        ok_a = ok_b = True
        gains = []
        for seed in TOY_SEEDS:
            res = toy_runs[seed]["csc"]
            recs = res.records
            first = recs[0].l_fusion
            at_switch = recs[res.switch_epoch - 1].l_fusion
            drop = 1 - at_switch / first
            stage2 = [r for r in recs if r.stage == 2]
            rise = stage2[-1].val_agreement - stage2[0].val_agreement
            gain = toy_runs[seed]["miou_csc"] - toy_runs[seed]["miou_no_csc"]
            gains.append(gain)
            ok_a &= drop >= 0.5
            ok_b &= rise >= 0.10
            parts.append(
                f"seed {seed}: switch@{res.switch_epoch} fusion drop {drop:.1%}, agreement "
                f"{stage2[0].val_agreement:.3f}->{stage2[-1].val_agreement:.3f} "
                f"(entry {toy_runs[seed]['entry_agreement']:.3f}, {len(stage2)} stage-II epochs), "
                f"test mIoU {toy_runs[seed]['miou_csc']:.3f} vs no-CSC {toy_runs[seed]['miou_no_csc']:.3f}"
            )
        wins = sum(g > 0 for g in gains)
        ok_c = wins >= 2 and np.mean(gains) > 0
        ok_t = toy_runs["seconds"] < 900
        summary = (f"(a) {'ok' if ok_a else 'FAIL'} (b) {'ok' if ok_b else 'FAIL'} "
                   f"(c) {'ok' if ok_c else 'FAIL'} [{wins}/3 wins, mean gain {np.mean(gains):+.3f}] "
                   f"runtime {toy_runs['seconds']:.0f}s {'ok' if ok_t else 'FAIL'}")
        for line in parts:
            print("    " + line)
        return ok_a and ok_b and ok_c and ok_t, summary + " | " + "; ".join(parts)
    _check(6, run)


# -- 7 scheduler ablation ---------------------------------------------------------------

def test_criterion_7_scheduler_trajectories(tmp_path):
    def run():
        generate(SceneSpec(n_classes=4, seed=7), 40, tmp_path)
        trajectories = {}
        for kind in gdwa.SCHEDULERS:
            cfg = replace(TOY_CONFIG, dataset_root=str(tmp_path), scheduler=kind, stage1_cap=1, max_epochs=4, seed=7)
            train_pairs, val_pairs = prepare_data(cfg)
            result = Trainer(cfg, train_pairs, val_pairs).fit()
            stage2 = [r for r in result.records if r.stage == 2]
            trajectories[kind] = [r.w_csc for r in stage2] + [stage2[-1].omega_next]
        distinct = len({tuple(v) for v in trajectories.values()}) == 3
        gdwa_varies = len(set(trajectories["gdwa"])) > 1
        fixed_exact = all(w == 0.1 for w in trajectories["fixed"])
        detail = "; ".join(f"{k}: " + ", ".join(f"{w:.4g}" for w in v) for k, v in trajectories.items())
        return distinct and gdwa_varies and fixed_exact, detail
    _check(7, run)


# -- 8 projection diagnostics -------------------------------------------------------------

def test_criterion_8_projection(toy_runs):
    def run():
        rng = np.random.default_rng(8)
        g = rng.standard_normal(100)
        e1, e2 = np.eye(2)
        constructed = [
            (projection_coefficient(g, g), (1.0, 1.0)),
            (projection_coefficient(e2, e1), (0.0, 0.0)),
            (projection_coefficient(-2 * g, g), (-2.0, -1.0)),
        ]
        exact = all(abs(a - ea) <= 1e-12 and abs(c - ec) <= 1e-12 for (a, c), (ea, ec) in constructed)
        records = toy_runs[7]["csc"].projection.records
        alphas = np.array([r.alpha_cf for r in records])
        mean_alpha = float(alphas.mean()) if records else math.nan
        consistent = all(np.sign(r.alpha_cf) == np.sign(r.cos_phi) for r in records)
        conflicts = sum(r.conflicting for r in records)
        ok = exact and bool(records) and math.isfinite(mean_alpha) and consistent
        return ok, (f"constructed pairs exact: {exact}; toy run {len(records)} sampled steps, mean alpha_cf "
                    f"{mean_alpha:.4g}, {conflicts} conflicting, sign-consistent: {consistent}")
    _check(8, run)


# -- 9 determinism and persistence --------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    def run():
        generate(SceneSpec(n_classes=4, seed=7), 30, tmp_path / "data")
        cfg = replace(TOY_CONFIG, dataset_root=str(tmp_path / "data"), stage1_cap=1, max_epochs=3,
                      deterministic=True, save_checkpoints=True, seed=7)
        train_pairs, val_pairs = prepare_data(cfg)

        lines = []
        for name in ("a", "b"):
            Trainer(cfg, train_pairs, val_pairs, out_dir=tmp_path / name).fit(max_epochs=1)
            lines.append((tmp_path / name / "metrics.tsv").read_bytes().splitlines()[1])
        same_epoch1 = lines[0] == lines[1]

        full = Trainer(cfg, train_pairs, val_pairs).fit().records[2]
        Trainer(cfg, train_pairs, val_pairs, out_dir=tmp_path / "part").fit(max_epochs=2)
        resumed = Trainer.resume(tmp_path / "part" / "last.ckpt", cfg, train_pairs, val_pairs)
        again = resumed.fit().records[-1]
        keys = ("l_int", "l_grad", "l_ssim", "l_color", "l_fusion", "l_csc", "w_csc", "l_total", "val_total")
        resume_diff = max(abs(getattr(full, k) - getattr(again, k)) for k in keys)

        vis, ir = train_pairs[0].vis, train_pairs[0].ir[:1]
        save_ppm(vis, tmp_path / "v.ppm")
        save_pgm(ir, tmp_path / "i.pgm")
        outs = []
        for name in ("f1.ppm", "f2.ppm"):
            subprocess.run(
                [sys.executable, "-m", "ssvif.cli", "fuse", "--checkpoint", str(tmp_path / "part" / "last.ckpt"),
                 "--vis", str(tmp_path / "v.ppm"), "--ir", str(tmp_path / "i.pgm"), "--out", str(tmp_path / name)],
                check=True,
            )
            outs.append((tmp_path / name).read_bytes())
        fuse_stable = outs[0] == outs[1]
        ok = same_epoch1 and resume_diff <= 1e-5 and fuse_stable
        return ok, (f"epoch-1 metrics lines identical: {same_epoch1}; resume vs uninterrupted epoch-3 max diff "
                    f"{resume_diff:.2e}; fuse byte-stable: {fuse_stable}")
    _check(9, run)


# -- 10 metric sanity ----------------------------------------------------------------------

def test_criterion_10_metric_sanity():
    def run():
        rng = np.random.default_rng(10)
        x = rng.uniform(0, 1, (32, 32))
        ssim_self = M.ssim_metric(x, x)
        img = rng.uniform(0, 1, (3, 16, 16))
        de_same = M.delta_e(img, img)
        sharma = float(M.ciede2000(np.array([50, 2.6772, -79.7751]).reshape(3, 1, 1),
                                   np.array([50, 0, -82.7485]).reshape(3, 1, 1)).ravel()[0])
        en_const = M.entropy(np.full((16, 16), 123, np.uint8))
        a = rng.integers(0, 256, (32, 32)).astype(np.uint8)
        b = np.clip(a.astype(int) + rng.integers(-20, 21, (32, 32)), 0, 255).astype(np.uint8)
        mi_gap = abs(M.mutual_information_pair(a, b) - M.mutual_information_pair(b, a))
        gt = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 1, 1], [2, 2, 2, 2]])
        pred = np.array([[0, 0, 1, 1], [0, 1, 1, 1], [2, 2, 2, 1], [2, 2, 2, 0]])
        _, miou = M.miou(pred, gt, 3)
        checks = {
            "SSIM(x,x)=1": abs(ssim_self - 1) <= 1e-12,
            "dE(identical)=0": de_same == 0,
            "CIEDE2000 pair": abs(sharma - 2.0425) <= 1e-4,
            "EN(const)=0": en_const == 0,
            "MI symmetric": mi_gap <= 1e-9,
            "4x4 mIoU": miou == (3 / 5 + 5 / 7 + 5 / 7) / 3,
        }
        failed = [k for k, v in checks.items() if not v]
        return not failed, (f"SSIM {ssim_self:.12f}, dE {de_same}, CIEDE2000 {sharma:.6f}, EN {en_const}, "
                            f"MI gap {mi_gap:.1e}, mIoU {miou:.6f} (71/105); failing: {failed or 'none'}")
    _check(10, run)
