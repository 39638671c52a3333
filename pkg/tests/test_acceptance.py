"""Acceptance gate. Each test prints one PASS/FAIL line, then asserts.

Run on its own with ``pytest tests/test_acceptance.py -v -s`` to see the lines
inline; they also appear in the captured output of a normal run.
"""
import math
import time
from fractions import Fraction

import numpy as np
import pytest

from pixelrcnn import kernels
from pixelrcnn.cli import main
from pixelrcnn.data import SynthSpec, pca_project, synth_generate
from pixelrcnn.layers import REFERENCE_CONFIG, ModelConfig, PixelRcnnModel, model_backward, model_forward, param_count
from pixelrcnn.metrics import class_metrics, cohen_kappa, load_matrix_csv, overall_accuracy
from pixelrcnn.tensor import RngState
from pixelrcnn.training import (
    AmsGradState,
    TrainConfig,
    amsgrad_step,
    cross_entropy,
    fit,
    logistic_baseline_fit,
    scaler_apply,
    scaler_fit,
    stratified_split,
    stratified_split_indices,
)

from conftest import REFERENCE_COUNTS, numeric_grad, rel_error

SEEDS = range(5)
TINY = 1e-6


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        return ok
    return emit


def test_criterion_1_param_counts(verdict):
    plain = param_count(ModelConfig())
    peep = param_count(ModelConfig(peepholes=True))
    assert verdict(1, plain == 30936 and peep == 31032, f"params {plain} (want 30936), with peepholes {peep} (want 31032)")


def test_criterion_2_shape_chain(verdict):
    _, cache = model_forward(PixelRcnnModel.init(seed=0), np.zeros((9, 5), np.float32))
    got = [shape for _, shape in cache.shapes()]
    want = [(9, 32), (9, 9), (9, 9, 1), (7, 7, 16), (1, 1, 32), (32,), (15,)]
    assert verdict(2, got == want, " -> ".join(str(s) for s in got))


def _lstm_isolated(mod, seed, peephole):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((2, 9, 5))
    Wx, Wh = 0.5 * rng.standard_normal((5, 16)), 0.5 * rng.standard_normal((4, 16))
    b, wc = 0.1 * rng.standard_normal(16), 0.3 * rng.standard_normal((3, 4))
    dY = rng.standard_normal((2, 9, 4))

    def loss():
        return float(np.sum(mod.lstm_forward(X, Wx, Wh, b, wc, peephole)[2][1:].transpose(1, 0, 2) * dY))

    gates, C, H = mod.lstm_forward(X, Wx, Wh, b, wc, peephole)
    dX, dWx, dWh, db, dwc = mod.lstm_backward(dY, X, Wx, Wh, wc, peephole, gates, C, H)
    pairs = [(X, dX), (Wx, dWx), (Wh, dWh), (b, db)] + ([(wc, dwc)] if peephole else [])
    return max(rel_error(a, numeric_grad(loss, p, 1e-5)) for p, a in pairs)


def _conv_isolated(mod, seed):
    rng = np.random.default_rng(seed)
    x, w, b = rng.standard_normal((2, 9, 9, 2)), rng.standard_normal((3, 3, 2, 4)), rng.standard_normal(4)
    dout = rng.standard_normal((2, 7, 7, 4))

    def loss():
        return float(np.sum(mod.conv2d_forward(x, w, b) * dout))

    dx, dw, db = mod.conv2d_backward(dout, x, w)
    return max(rel_error(a, numeric_grad(loss, p, 1e-5)) for p, a in [(x, dx), (w, dw), (b, db)])


def _relu_pattern(cache):
    return np.concatenate([(cache.conv1_pre > 0).ravel(), (cache.conv2_pre > 0).ravel(), (cache.tdd_pre > 0).ravel()])


def _model_error(cfg, seed, max_entries=None):
    """Worst relative error, kink skips, tiny-gradient count and their worst absolute error.

    Entries with |analytic| + |numeric| below TINY sit under the finite-difference
    round-off (about 1e-11 for a loss near 3 at h=1e-5), so they are held to an
    absolute bound instead of a relative one.
    """
    model = PixelRcnnModel.init(cfg, seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for p in model.params().values():
        p += 0.05 * rng.standard_normal(p.shape)
    X = rng.standard_normal((3, cfg.t, cfg.b))
    y = rng.integers(0, cfg.K, 3)

    def run():
        probs, cache = model_forward(model, X, "train", RngState(seed))
        return cross_entropy(probs, y), _relu_pattern(cache)

    _, base = model_forward(model, X, "train", RngState(seed))
    grads = model_backward(model, base, y)
    pattern = _relu_pattern(base)
    worst, skipped, tiny, tiny_abs, h = 0.0, 0, 0, 0.0, 1e-5
    for name, p in model.params().items():
        flat = p.reshape(-1)
        idx = range(flat.size) if max_entries is None or flat.size <= max_entries else rng.choice(
            flat.size, max_entries, replace=False)
        for k in idx:
            old = flat[k]
            flat[k] = old + h
            fp, pp = run()
            flat[k] = old - h
            fm, pm = run()
            flat[k] = old
            if not (np.array_equal(pp, pattern) and np.array_equal(pm, pattern)):
                skipped += 1
                continue
            a, n = grads[name].reshape(-1)[k], (fp - fm) / (2 * h)
            if abs(a) + abs(n) < TINY:
                tiny += 1
                tiny_abs = max(tiny_abs, abs(a - n))
            else:
                worst = max(worst, rel_error(a, n))
    return worst, skipped, tiny, tiny_abs


def test_criterion_3_gradients(verdict):
    t0 = time.time()
    errs = {}
    for name, mod in kernels.available_backends().items():
        errs[f"lstm[{name}]"] = max(_lstm_isolated(mod, s, s % 2 == 0) for s in SEEDS)
        errs[f"conv[{name}]"] = max(_conv_isolated(mod, s) for s in SEEDS)
    small = ModelConfig(t=5, b=3, u=4, d_out=5, n1=2, f1=2, n2=3, f2=3, K=3, dropout_p=0.3, peepholes=True)
    full = ModelConfig(peepholes=True, dropout_p=0.3)
    skipped = tiny = 0
    tiny_abs = 0.0
    for label, cfg, entries in (("model small, every entry", small, None), ("model full size, 300 entries/tensor", full, 300)):
        results = [_model_error(cfg, s, entries) for s in SEEDS]
        errs[label] = max(r[0] for r in results)
        skipped += sum(r[1] for r in results)
        tiny += sum(r[2] for r in results)
        tiny_abs = max([tiny_abs] + [r[3] for r in results])
    worst = max(errs.values())
    ok = worst < 1e-4 and tiny_abs < 1e-9
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
    assert verdict(3, ok, f"max rel err {worst:.2e} < 1e-4 ({detail}); {tiny} entries with |grad| < {TINY:g} "
                          f"held to abs err {tiny_abs:.1e} < 1e-9; {skipped} skipped at ReLU kinks; {time.time() - t0:.0f}s")


def test_criterion_4_amsgrad_oracle(verdict):
    rng = np.random.default_rng(4)
    grads = (rng.standard_normal(20) * np.linspace(2, 0.05, 20)).tolist()
    theta = m = v = vhat = 0.0
    p = {"w": np.array([theta])}
    state = AmsGradState.zeros_like(p)
    worst, monotone, prev = 0.0, True, 0.0
    for g in grads:
        m = 0.86 * m + 0.14 * g
        v = 0.98 * v + 0.02 * g * g
        vhat = max(vhat, v)
        theta -= 0.01 * m / math.sqrt(vhat + 1e-9)
        amsgrad_step(state, p, {"w": np.array([g])}, 0.01)
        worst = max(worst, abs(p["w"][0] - theta))
        monotone &= bool(state.v_hat["w"][0] >= prev)
        prev = state.v_hat["w"][0]
    assert verdict(4, worst <= 1e-12 and monotone, f"max |delta theta| {worst:.1e} <= 1e-12, v_hat non-decreasing: {monotone}")


def test_criterion_5_metrics_oracle(verdict, reference_confusion_path):
    cm = load_matrix_csv(reference_confusion_path)
    rows = cm.counts.tolist()
    n = sum(map(sum, rows))
    po = Fraction(sum(rows[k][k] for k in range(15)), n)
    pe = sum(Fraction(sum(rows[k]), n) * Fraction(sum(r[k] for r in rows), n) for k in range(15))
    oracle = float((po - pe) / (1 - pe))
    oa, kappa = overall_accuracy(cm), cohen_kappa(cm)
    water = next(m for m in class_metrics(cm) if m.name == "Water")
    # 35610/36846 = 0.9664549..., so the quoted 0.96646 is checked to within 1e-5
    ok = (abs(oa - 0.96646) < 1e-5 and oa == 35610 / 36846 and water.producers == 1.0
          and round(100 * water.users, 1) == 99.0 and abs(kappa - oracle) < 1e-12)
    detail = (f"OA {oa:.6f} = 35610/36846 (|OA - 0.96646| {abs(oa - 0.96646):.1e}), Water PA {100 * water.producers:.1f}% UA {100 * water.users:.1f}%, "
              f"kappa {kappa:.6f} vs oracle diff {abs(kappa - oracle):.1e}; "
              f"reference OA 0.965 (delta {oa - 0.965:+.4f}), reference kappa 0.914 (delta {kappa - 0.914:+.4f})")
    assert verdict(5, ok, detail)


def test_criterion_6_synthetic_end_to_end(verdict):
    t0 = time.time()
    ds = synth_generate(SynthSpec.uniform(15, 200, noise=0.15, seed=42, shift_jitter=3.0, offset_spread=0.2))
    tr, te = stratified_split(ds, 0.6, 42)
    sc = scaler_fit(tr)
    tr, te = scaler_apply(sc, tr, np.float32), scaler_apply(sc, te, np.float32)
    _, base_oa = logistic_baseline_fit(tr, te, TrainConfig(epochs=150, seed=42))
    report = fit(PixelRcnnModel.init(REFERENCE_CONFIG, seed=42), tr, TrainConfig(epochs=150, seed=42), te)
    oa, kappa = report.final["test_OA"], report.final["test_kappa"]
    ok = oa >= 0.95 and kappa >= 0.90 and base_oa < oa
    detail = (f"test OA {oa:.4f} >= 0.95, kappa {kappa:.4f} >= 0.90, baseline OA {base_oa:.4f} < OA; "
              f"{len(report.epochs)} epochs, {time.time() - t0:.0f}s")
    assert verdict(6, ok, detail)


def test_criterion_7_split_and_scaler(verdict):
    labels = np.repeat(np.arange(15), REFERENCE_COUNTS)
    tr_idx, te_idx = stratified_split_indices(labels, 0.6, 0)
    ds = synth_generate(SynthSpec.uniform(15, 60, seed=7))
    tr, _ = stratified_split(ds, 0.6, 7)
    Z = scaler_apply(scaler_fit(tr), tr)
    mean_err = float(np.abs(Z.X.mean(axis=0)).max())
    std_err = float(np.abs(Z.X.std(axis=0) - 1).max())
    ok = len(tr_idx) == 55270 and len(te_idx) == 36846 and mean_err < 1e-6 and std_err < 1e-6
    assert verdict(7, ok, f"split {len(tr_idx)}/{len(te_idx)} (want 55270/36846), max |mean| {mean_err:.1e}, "
                          f"max |std-1| {std_err:.1e}")


def test_criterion_8_pca_oracle(verdict):
    rng = np.random.default_rng(8)
    F = rng.standard_normal((500, 45)) @ rng.standard_normal((45, 45))
    res = pca_project(F.reshape(500, 9, 5), 3, standardize=False)
    ev = np.linalg.eigvalsh(np.cov(F, rowvar=False))[::-1]
    diff = float(np.abs(res.ratios - ev / ev.sum()).max())
    ok = diff < 1e-8 and bool(np.all(np.diff(res.ratios) <= 0)) and bool(np.all(res.cumulative <= 1 + 1e-12))
    assert verdict(8, ok, f"max ratio diff vs covariance eigh {diff:.1e} < 1e-8, sorted, cumulative max {res.cumulative[-1]:.12f}")


def test_criterion_9_determinism(verdict, tmp_path):
    assert main(["synth", "--classes", "4", "--per-class", "40", "--seed", "9", "--out", str(tmp_path)]) == 0
    runs = []
    for name in ("a", "b"):
        argv = ["train", "--data", str(tmp_path / "dataset.pxrc"), "--epochs", "10", "--seed", "3",
                "--quiet", "--out", str(tmp_path / name)]
        assert main(argv) == 0
        runs.append({f: (tmp_path / name / f).read_bytes() for f in ("report.csv", "checkpoint.prcn")})
    same = runs[0] == runs[1]
    assert verdict(9, same, f"two train runs: report.csv and checkpoint.prcn byte-identical: {same}")
