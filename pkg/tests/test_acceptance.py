"""One test per acceptance criterion, each printing a single PASS/FAIL line."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from helpers import layer_gradient_errors, loop_fuse, relative_error, sampled_central_difference
from posefuse import evaluation as ev
from posefuse import geometry as geo
from posefuse.config import parse_config
from posefuse.fusion import FusionOp, early_fuse_weights, late_fuse, sew_into_models
from posefuse.geometry import EulerAngles
from posefuse.nn import (
    AdaptiveAvgPool2d,
    AvgPool1d,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    ReLU,
    Shift,
    build_model,
    combine_homoscedastic,
    combine_stable,
    loss_stable,
    loss_stable_with_grad,
)
from posefuse.pipeline import run_pipeline

# Measured once on the committed synthetic benchmark (seed 0, 600 samples, 200 epochs)
# and pinned; the runs must stay within 10% of these.
PINNED_IMPROVEMENT_SEED0 = {"unimodalA": 5.941, "unimodalB": 6.243}
PINNED_HLFF_RATIO = {0: 0.791, 1: 0.568, 2: 1.063}
PINNED_ACCURACY_SHA256_SEED0 = "9db88d62663190962ab4205617cc36478764e70ab9d0127acee46afd20a50eb4"
PIN_TOLERANCE = 0.10


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
        return False


# ------------------------------------------------------------------ 1: losses

def test_criterion_1_loss_identity():
    rng = np.random.default_rng(1)
    with Timer() as t:
        worst = 0.0
        for _ in range(1000):
            lx, lq = rng.uniform(0, 10, size=2)
            sx, sq = np.exp(rng.uniform(-3, 3, size=2))
            stable = combine_stable(lx, lq, math.log(sx ** 2), math.log(sq ** 2))
            worst = max(worst, abs(stable - combine_homoscedastic(lx, lq, sx, sq)))
    ok = worst < 1e-9 and t.elapsed < 1.0
    verdict(1, ok, f"max |stable - homoscedastic| = {worst:.2e} over 1000 draws in {t.elapsed:.3f} s")
    assert ok


# --------------------------------------------------------------- 2: gradients

def test_criterion_2_gradient_correctness():
    rng = np.random.default_rng(2)
    errs = {}
    with Timer() as t:
        layers = {
            "dense": (Dense(5, 4, rng=rng, bias_init="uniform"), rng.normal(size=(3, 5))),
            "conv": (Conv2d(2, 3, 3, stride=2, padding=1, rng=rng), rng.normal(size=(2, 2, 7, 7))),
            "relu": (ReLU(), rng.normal(size=(3, 6)) + 0.05),
            "adaptive_pool": (AdaptiveAvgPool2d(4), rng.normal(size=(2, 3, 7, 9))),
            "avg_pool": (AvgPool1d(2), rng.normal(size=(3, 8))),
            "flatten": (Flatten(), rng.normal(size=(2, 3, 2, 2))),
            "shift": (Shift(6), rng.normal(size=(4, 6))),
        }
        for name, (layer, x) in layers.items():
            for k, v in layer_gradient_errors(layer, x).items():
                errs[f"{name}.{k}"] = v
        drop = Dropout(0.5)

        def reseed():
            drop.rng = np.random.default_rng(5)

        errs["dropout.input"] = layer_gradient_errors(drop, rng.normal(size=(4, 10)), reseed=reseed)["input"]

        # full model, including s_x and s_q at their initial values
        model = build_model("A", seed=2, feature_dim=8, pool_window=2)
        assert (model.s_x, model.s_q) == (0.0, -3.0)
        x = rng.normal(size=(2, 3, 12, 12))
        model.backbone.calibrate(model.backbone.trunk_forward(rng.normal(size=(4, 3, 12, 12))))
        tgt = rng.normal(size=(2, 7))

        def loss():
            model.head.dropout.rng = np.random.default_rng(9)
            return loss_stable(model.forward(x, mode="train"), tgt, model.s_x, model.s_q)

        model.zero_grad()
        model.head.dropout.rng = np.random.default_rng(9)
        pred = model.forward(x, mode="train")
        _, dpred, ds_x, ds_q = loss_stable_with_grad(pred, tgt, model.s_x, model.s_q)
        grads = {k: v.copy() for k, v in model.backward(dpred, ds_x, ds_q).items()}
        for i, (name, arr) in enumerate(model.parameters().items()):
            if name.startswith("loss."):
                continue
            idx, num = sampled_central_difference(loss, arr, 64, seed=i)
            errs[f"model.{name}"] = relative_error(grads[name].reshape(-1)[idx], num)
        for attr in ("s_x", "s_q"):
            holder = np.array([getattr(model, attr)])

            def f(attr=attr, holder=holder):
                setattr(model, attr, float(holder[0]))
                return loss()

            _, num = sampled_central_difference(f, holder, 1)
            setattr(model, attr, float(holder[0]))
            errs[f"model.loss.{attr}"] = relative_error(grads[f"loss.{attr}"], num)
    worst_name = max(errs, key=errs.get)
    ok = errs[worst_name] < 1e-4 and t.elapsed < 30.0
    verdict(2, ok, f"{len(errs)} gradient checks, worst {worst_name} rel err {errs[worst_name]:.2e}, "
                   f"{t.elapsed:.1f} s")
    assert ok, {k: v for k, v in errs.items() if v >= 1e-4}


# -------------------------------------------------------------- 3: quaternions

def test_criterion_3_quaternion_suite():
    rng = np.random.default_rng(3)
    with Timer() as t:
        identity = geo.euler_to_quaternion_paper(EulerAngles(0.0, 0.0, 0.0)).as_array().tolist()
        worst = 0.0
        for _ in range(10_000):
            e = EulerAngles(rng.uniform(-math.pi, math.pi), rng.uniform(-1.5, 1.5), rng.uniform(-math.pi, math.pi))
            back = geo.quaternion_to_euler(geo.euler_to_quaternion_standard(e))
            diff = geo.wrap_angle(back.as_array() - e.as_array())
            worst = max(worst, float(np.abs(diff).max()))
        q = geo.Quaternion(*geo.normalize(rng.normal(size=4)))
        antipodal = geo.rotation_error_deg(q, -q)
    ok = identity == [1.0, 0.0, 0.0, 0.0] and worst < 1e-9 and antipodal == 0.0 and t.elapsed < 5.0
    verdict(3, ok, f"identity {identity}, round-trip max err {worst:.2e} over 10000, "
                   f"e_r(q, -q) = {antipodal}, {t.elapsed:.2f} s")
    assert ok


# ------------------------------------------------------------- 4: early fusion

def test_criterion_4_early_fusion_exactness():
    with Timer() as t:
        a, b = build_model("A", seed=4, feature_dim=32), build_model("B", seed=4, feature_dim=32)
        exact = True
        untouched = True
        for op in ("add", "multiply"):
            fused = early_fuse_weights(a.backbone.top_dense, b.backbone.top_dense, op)
            for k in ("weight", "bias"):
                oracle = loop_fuse(a.backbone.top_dense.params[k], b.backbone.top_dense.params[k], op)
                exact &= fused.params[k].tobytes() == oracle.tobytes()
            for original, sewn in zip((a, b), sew_into_models(a, b, fused, op)):
                sp, op_ = sewn.parameters(), original.parameters()
                for name, arr in op_.items():
                    if name.startswith("backbone.top_dense."):
                        exact &= sp[name].tobytes() == fused.params[name.rsplit(".", 1)[1]].tobytes()
                    else:
                        untouched &= sp[name].tobytes() == arr.tobytes()
    ok = exact and untouched and t.elapsed < 1.0
    verdict(4, ok, f"fused == loop oracle bitwise: {exact}; other layers unchanged: {untouched}; "
                   f"{t.elapsed:.3f} s")
    assert ok


# ------------------------------------------------------------------ 5: Jensen

def test_criterion_5_jensen_property():
    rng = np.random.default_rng(5)
    with Timer() as t:
        worst = -np.inf
        total = 0
        for m in (2, 3, 4, 5):
            n = 2500
            members = rng.normal(size=(m, n, 7)) * rng.uniform(0.1, 50, size=(m, n, 1))
            members[..., 3:] /= np.linalg.norm(members[..., 3:], axis=2, keepdims=True)
            gt = rng.normal(size=(n, 3)) * 10
            fused = late_fuse(members, FusionOp.AVERAGE)
            fused_err = np.linalg.norm(fused[:, :3] - gt, axis=1)
            member_err = np.linalg.norm(members[..., :3] - gt[None], axis=2).mean(axis=0)
            worst = max(worst, float((fused_err - member_err).max()))
            total += n
    ok = total == 10_000 and worst <= 1e-12 and t.elapsed < 5.0
    verdict(5, ok, f"max(fused err - mean member err) = {worst:.3e} over {total} ensembles, {t.elapsed:.2f} s")
    assert ok


# --------------------------------------------------------- 6 and 8: golden runs

def golden_config(seed: int, out: Path, timing: bool):
    return parse_config(f"[experiment]\nseed = {seed}\noutput_dir = {out}\n"
                        f"timing = {'yes' if timing else 'no'}\n[dataset]\nn = 600\n[train]\nepochs = 200\n")


@pytest.fixture(scope="module")
def golden_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("golden")
    runs, walls = {}, {}
    for key, seed, timing in (("seed0", 0, True), ("seed0_repeat", 0, True),
                              ("seed1", 1, False), ("seed2", 2, False)):
        t0 = time.perf_counter()
        runs[key] = run_pipeline(golden_config(seed, root / key, timing))
        walls[key] = time.perf_counter() - t0
    return runs, walls


def median_et(result, name):
    return next(r.median_et for r in result.reports if r.model == name)


@pytest.mark.slow
def test_criterion_6_end_to_end_golden_run(golden_runs):
    runs, walls = golden_runs
    base = runs["seed0"]
    problems = []
    improvements = {}
    for name in ("unimodalA", "unimodalB"):
        imp = base.manifest["untrained_median_et_m"][name] / median_et(base, name)
        improvements[name] = imp
        pinned = PINNED_IMPROVEMENT_SEED0[name]
        if imp < 5.0:
            problems.append(f"{name} improves only {imp:.2f}x")
        if abs(imp - pinned) > PIN_TOLERANCE * pinned:
            problems.append(f"{name} improvement {imp:.3f} drifted from pinned {pinned}")
    ratios = {}
    for seed, key in ((0, "seed0"), (1, "seed1"), (2, "seed2")):
        r = runs[key]
        ratio = median_et(r, "HLFF") / min(median_et(r, "unimodalA"), median_et(r, "unimodalB"))
        ratios[seed] = ratio
        if ratio > 1.1:
            problems.append(f"seed {seed}: HLFF / best unimodal = {ratio:.3f} > 1.1")
        if abs(ratio - PINNED_HLFF_RATIO[seed]) > PIN_TOLERANCE * PINNED_HLFF_RATIO[seed]:
            problems.append(f"seed {seed}: ratio {ratio:.3f} drifted from pinned {PINNED_HLFF_RATIO[seed]}")
    wall = walls["seed0"]
    if wall >= 600:
        problems.append(f"pipeline took {wall:.0f} s")
    detail = (f"improvement A {improvements['unimodalA']:.2f}x B {improvements['unimodalB']:.2f}x; "
              f"HLFF/min ratios {', '.join(f'{v:.3f}' for v in ratios.values())}; "
              f"wall-clock {wall:.0f} s")
    verdict(6, not problems, detail + ("" if not problems else "; " + "; ".join(problems)))
    assert not problems, problems


@pytest.mark.slow
def test_criterion_8_determinism(golden_runs):
    runs, _ = golden_runs
    a, b = runs["seed0"].manifest, runs["seed0_repeat"].manifest
    same = a["checksums"] == b["checksums"]
    models = sorted(k for k in a["checksums"] if k.startswith("models/"))
    golden = a["checksums"]["accuracy.csv"] == PINNED_ACCURACY_SHA256_SEED0
    leaked = a["audit"]["test_images_read_in_training"]
    ok = same and len(models) >= 9 and golden and not leaked
    verdict(8, ok, f"{len(a['checksums'])} checksums identical across runs: {same} "
                   f"({len(models)} model files); accuracy.csv matches pinned golden: {golden}; "
                   f"test images read in training: {len(leaked)}")
    assert ok
    on_disk = json.loads((runs["seed0"].output_dir / "manifest.json").read_text())
    assert on_disk["checksums"] == a["checksums"]


# ------------------------------------------------------------------ 7: report

def test_criterion_7_report_fidelity():
    row = ev.MetricsReport("M15 - HLFF", 7.762, 8.829, 1.008, 4.618, 0.144)
    md = ev.render_report([row], "markdown").splitlines()[2]
    verbatim = md == "| M15 - HLFF | 7.762 | 8.829 | 1.008 | 4.618 | 0.144 |"
    csv_text = ev.render_report([row, ev.MetricsReport("x", 1.23456, 2.0, 3.0, 4.0, None)])
    fixpoint = ev.render_report(ev.parse_report_csv(csv_text)) == csv_text
    ok = verbatim and fixpoint
    verdict(7, ok, f"M15 row verbatim: {verbatim}; CSV render-parse-render fixpoint: {fixpoint}")
    assert ok


# ------------------------------------------------------------------- 9: MAPST

def test_criterion_9_mapst_harness():
    calls = []

    def predict(batch):
        calls.append(len(batch))
        time.sleep(0.001 * len(batch))

    mapst = ev.measure_mapst(predict, list(range(30)))
    batches_of_ten = set(calls) == {10}
    ok = 0.0009 <= mapst <= 0.0015 and batches_of_ten
    verdict(9, ok, f"MAPST {mapst * 1000:.3f} ms per sample with 1 ms injected delay; "
                   f"batches of ten: {batches_of_ten}")
    assert ok
