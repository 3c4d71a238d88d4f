"""End-to-end acceptance checks; each prints one PASS/FAIL line (also repeated in the run summary).

Criteria 6-8 share one synthetic dataset (4 classes x 50 samples, noise 0) written
through the CLI, and one on-disk extractor cache so the later criteria do not retrain
networks that the first determinism run already produced.
"""
import json
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from m2fusion import ccf, classify, cnn, dataset, imaging, pipeline
from m2fusion.classify import ScoreVector


def record(capsys, n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# --- 1. signal image ----------------------------------------------------------

def test_criterion_1_signal_image(capsys):
    t0 = time.perf_counter()
    seq = np.repeat(np.arange(1.0, 7.0)[:, None], 52, axis=1)
    img = imaging.make_signal_image(seq)
    # channel k is the constant k, so after min-max scaling a row holds (k - 1) / 5
    labels = np.rint(img * 5 + 1).astype(int)
    rows = "".join(str(v) for v in labels[:, 0])
    exact = (np.array_equal(img, (labels - 1) / 5.0) and np.all(labels == labels[:, :1])
             and rows == "123456135246142536152616")
    secs = time.perf_counter() - t0
    record(capsys, 1, exact and img.shape == (24, 52) and secs < 1,
           f"rows {rows}, shape {img.shape}, {secs:.3f}s")


# --- 2. Prewitt ---------------------------------------------------------------

def nested_sum_prewitt(img):
    h, w = img.shape
    kernel = [[1, 1, 1], [0, 0, 0], [-1, -1, -1]]
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(3):
                for dj in range(3):
                    ii = min(max(i + di - 1, 0), h - 1)
                    jj = min(max(j + dj - 1, 0), w - 1)
                    acc += kernel[di][dj] * img[ii, jj]
            out[i, j] = acc
    return out


def test_criterion_2_prewitt(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    mismatches = 0
    for _ in range(50):
        img = rng.integers(0, 256, size=(rng.integers(3, 30), rng.integers(3, 30))).astype(float)
        mismatches += not np.array_equal(imaging.prewitt(img), nested_sum_prewitt(img))
    const_ok = all(np.all(imaging.prewitt(np.full((9, 7), v)) == 0) for v in (0.0, 1.0, 37.0))
    step = np.zeros((10, 12))
    step[:, 6:] = 255.0
    vert_ok = np.all(imaging.prewitt(step)[1:-1, 1:-1] == 0)
    secs = time.perf_counter() - t0
    record(capsys, 2, mismatches == 0 and const_ok and vert_ok and secs < 5,
           f"{50 - mismatches}/50 exact, constant->0 {const_ok}, vertical step {vert_ok}, {secs:.2f}s")


# --- 3. CCA -------------------------------------------------------------------

def grid_correlation(x, y, step_deg=1.0):
    ang = np.deg2rad(np.arange(0.0, 180.0, step_deg))
    dirs = np.stack([np.cos(ang), np.sin(ang)])
    u = dirs.T @ (x - x.mean(axis=1, keepdims=True))
    v = dirs.T @ (y - y.mean(axis=1, keepdims=True))
    den = np.sqrt((u * u).sum(axis=1))[:, None] * np.sqrt((v * v).sum(axis=1))[None, :]
    return float(np.max(np.abs(u @ v.T / den)))


def test_criterion_3_cca(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    z = rng.normal(size=(2, 500))
    x = rng.normal(size=(4, 2)) @ z + 0.5 * rng.normal(size=(4, 500))
    y = rng.normal(size=(3, 2)) @ z + 0.5 * rng.normal(size=(3, 500))
    t = ccf.fit_cca(x, y, lam=0.0)
    xp, yp = ccf.transform(t, x, y)
    var_err = max(np.abs(xp.var(axis=1, ddof=1) - 1).max(), np.abs(yp.var(axis=1, ddof=1) - 1).max())
    ok_a = var_err < 1e-6 and np.all(np.diff(t.correlations) <= 0)
    grid_err = 0.0
    for _ in range(20):
        s = rng.normal(size=(1, 300))
        a = rng.normal(size=(2, 1)) @ s + rng.normal(size=(2, 300))
        b = rng.normal(size=(2, 1)) @ s + rng.normal(size=(2, 300))
        grid_err = max(grid_err, abs(ccf.fit_cca(a, b, lam=0.0).correlations[0] - grid_correlation(a, b)))
    same = rng.normal(size=(5, 200))
    self_err = float(np.abs(ccf.fit_cca(same, same.copy(), lam=0.0).correlations - 1).max())
    secs = time.perf_counter() - t0
    record(capsys, 3, ok_a and grid_err < 1e-3 and self_err < 1e-8 and secs < 30,
           f"unit-variance err {var_err:.1e}, grid err {grid_err:.1e}, X=Y err {self_err:.1e}, {secs:.1f}s")


# --- 4. gradient check --------------------------------------------------------

def test_criterion_4_gradients(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    net2d = cnn.build_signal_cnn(24, 52, hidden_fc=500, classes=27, seed=4)
    e2d = cnn.gradient_errors(net2d, rng.random((24, 52, 1)), 5, per_layer=200)
    net1d = cnn.build_1d_cnn(52, 6, classes=27, seed=4)
    e1d = cnn.gradient_errors(net1d, rng.normal(size=(52, 6)), 11, per_layer=200)
    worst = max(list(e2d.values()) + list(e1d.values()))
    secs = time.perf_counter() - t0
    kinds = {**{f"2d/{k}": v for k, v in e2d.items()}, **{f"1d/{k}": v for k, v in e1d.items()}}
    record(capsys, 4, worst < 1e-4 and len(kinds) == 4 and secs < 60,
           ", ".join(f"{k} {v:.1e}" for k, v in kinds.items()) + f", {secs:.1f}s")


# --- 5. learning-rate schedule ------------------------------------------------

def test_criterion_5_schedule(capsys):
    ii = [cnn.TrainConfig.table_ii().lr_at(e) for e in (0, 10, 20)]
    iii = [cnn.TrainConfig.table_iii().lr_at(e) for e in (0, 10, 20)]
    record(capsys, 5, ii == [0.005, 0.0025, 0.00125] and iii == [0.001, 0.0005, 0.00025],
           f"depth schedule {ii}, signal schedule {iii}")


# --- 6-8. synthetic end-to-end ------------------------------------------------

@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    subprocess.run([sys.executable, "-m", "m2fusion", "synth", "--out", str(root / "data"),
                    "--samples-per-class", "50", "--noise", "0", "--seed", "0"], check=True)
    return root


def cli_run(root, out, cache=None):
    cmd = [sys.executable, "-m", "m2fusion", "run", "--framework", "multistage",
           "--manifest", str(root / "data" / "manifest.txt"), "--out-dir", str(out),
           "--preset", "desk", "--seed", "0", "--repeats", "20", "--quiet"]
    if cache:
        cmd += ["--cache-dir", str(cache)]
    t0 = time.perf_counter()
    subprocess.run(cmd, check=True, stdout=subprocess.DEVNULL)
    return json.loads((out / "report_multistage.json").read_text()), time.perf_counter() - t0


def test_criterion_6_determinism(synth, capsys):
    # the first run fills the cache for later criteria; the second retrains everything
    a, ta = cli_run(synth, synth / "run_a", cache=synth / "cache")
    b, tb = cli_run(synth, synth / "run_b")
    same_acc = a["repeat_accuracies"] == b["repeat_accuracies"]
    same_conf = a["repeat_confusions"] == b["repeat_confusions"] and a["confusion"] == b["confusion"]
    same_csv = (synth / "run_a" / "confusion_multistage.csv").read_bytes() == \
        (synth / "run_b" / "confusion_multistage.csv").read_bytes()
    record(capsys, 6, same_acc and same_conf and same_csv and max(ta, tb) < 600,
           f"accuracies equal {same_acc}, confusions equal {same_conf and same_csv}, "
           f"mean {a['mean_accuracy']:.4f}, runs {ta:.0f}s / {tb:.0f}s")


@pytest.fixture(scope="module")
def framework_reports(synth):
    ds = dataset.load_dataset(synth / "data" / "manifest.txt")
    cfg = pipeline.PipelineConfig.desk()
    cache = pipeline.ExtractorCache(synth / "cache")
    enc = pipeline.encode(ds, cfg)
    t0 = time.perf_counter()
    reports = {fw: pipeline.run_framework(fw, ds, cfg, cache, enc=enc) for fw in pipeline.FRAMEWORKS}
    return reports, time.perf_counter() - t0


def test_criterion_7_fusion_gain(framework_reports, capsys):
    reports, secs = framework_reports
    parts, ok = [], secs < 1800
    for fw, r in reports.items():
        best_single = max(r.modality_mean_accuracies.values())
        gain = r.mean_accuracy - best_single
        good = gain >= 0.20 and r.mean_accuracy >= 0.90
        ok &= good
        parts.append(f"{fw} {r.mean_accuracy:.4f} (best single {best_single:.4f}, gain {100 * gain:+.1f} pt)"
                     + ("" if good else " FAIL"))
    record(capsys, 7, ok, "; ".join(parts) + f"; {secs:.0f}s")


def test_criterion_8_cost_ordering(framework_reports, capsys):
    reports, _ = framework_reports
    calls = {fw: r.extractor_calls_per_sample for fw, r in reports.items()}
    us = {fw: r.inference_us for fw, r in reports.items()}
    fastest = min(us, key=us.get)
    record(capsys, 8, calls == {"multistage": 4, "hybrid": 4, "efficient": 2} and fastest == "efficient",
           f"calls {calls}, inference us/sample " + ", ".join(f"{k} {v:.0f}" for k, v in us.items()))


# --- 9. max fusion ------------------------------------------------------------

def test_criterion_9_max_fusion(capsys):
    rng = np.random.default_rng(9)
    idem = soft = 0
    for _ in range(1000):
        raw = rng.normal(scale=5.0, size=rng.integers(2, 30))
        s = classify.softmax_normalize(ScoreVector(raw))
        idem += classify.max_fuse(s, s) == int(np.argmax(s.scores))
        raw = rng.normal(scale=5.0, size=rng.integers(2, 30))
        soft += int(np.argmax(classify.softmax_normalize(ScoreVector(raw)).scores)) == int(np.argmax(raw))
    record(capsys, 9, idem == 1000 and soft == 1000, f"max_fuse(s, s) {idem}/1000, softmax argmax {soft}/1000")


# --- 10. composite ------------------------------------------------------------

def test_criterion_10_composite(capsys):
    rng = np.random.default_rng(10)
    gray_ok = True
    for _ in range(20):
        base = rng.integers(0, 5, size=(12, 16)) / 4.0
        filt = np.where(rng.random((12, 16)) < 0.5, base, rng.integers(0, 5, size=(12, 16)) / 4.0)
        rgb = imaging.composite(base, filt).channels_last()
        eq = base == filt
        gray_ok &= bool(np.all(rgb[eq, 0] == rgb[eq, 1]) and np.all(rgb[eq, 1] == rgb[eq, 2]))
    green = imaging.composite(np.zeros((1, 1)), np.ones((1, 1))).channels_last()[0, 0].tolist()
    magenta = imaging.composite(np.ones((1, 1)), np.zeros((1, 1))).channels_last()[0, 0].tolist()
    ok = gray_ok and green == [0.0, 1.0, 0.0] and magenta == [1.0, 0.0, 1.0]
    record(capsys, 10, ok, f"gray where equal {gray_ok}, green {green}, magenta {magenta}")
