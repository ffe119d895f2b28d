"""Acceptance gate: eight checks, each printing one pass/fail line.

Every expected value here is re-derived independently of the library code:
brute-force enumeration for co-occurrence counts, straight-line formula
transcriptions for the texture features, central finite differences for
gradients, and hand-worked arithmetic for the metric examples.
"""

import time

import numpy as np
import pytest

from fogstat import dataio, dbsfnet, kem, metrics, ndtensor as nd, trainer


def _gate(capsys, name, fn):
    t0 = time.perf_counter()
    try:
        detail = fn()
        ok = True
    except AssertionError as exc:
        detail = str(exc).splitlines()[0] if str(exc) else "assertion failed"
        ok = False
    dt = time.perf_counter() - t0
    with capsys.disabled():
        print(f"[{'PASS' if ok else 'FAIL'}] {name} ({dt:.1f}s): {detail}")
    if not ok:
        pytest.fail(f"{name}: {detail}")


# --- 1. texture feature oracle ---------------------------------------------

def _brute_counts(q, levels):
    h, w = q.shape
    counts = np.zeros((4, levels, levels), dtype=np.int64)
    for l, (dr, dc) in enumerate(kem.OFFSETS):
        for i in range(h):
            for j in range(w):
                if 0 <= i + dr < h and 0 <= j + dc < w:
                    counts[l, q[i, j], q[i + dr, j + dc]] += 1
                    counts[l, q[i + dr, j + dc], q[i, j]] += 1
    return counts


def _straight_line_features(mats):
    """Literal transcription of the eight feature definitions, written as
    plain loops with no shared code with the library."""
    n = len(mats)
    mean = var = hom = con = dis = ent = ene = cor = 0.0
    for q in mats.values():
        g = q.shape[0]
        mu = sum(m * q[m, nn] for m in range(g) for nn in range(g))
        va = sum(q[m, nn] * (m - mu) ** 2 for m in range(g) for nn in range(g))
        mean += mu
        var += va
        for m in range(g):
            for nn in range(g):
                hom += q[m, nn] / (1.0 + (m - nn) ** 2)
                con += q[m, nn] * (m - nn) ** 2
                dis += q[m, nn] * abs(m - nn)
                if q[m, nn] > 0:
                    ent -= q[m, nn] * np.log(q[m, nn])
                ene += q[m, nn] ** 2
        if va < 1e-12:
            cor += 1.0
        else:
            cor += sum(q[m, nn] * (m - mu) * (nn - mu)
                       for m in range(g) for nn in range(g)) / va
    return np.array([mean, var, hom, con, dis, ent, ene, cor]) / n


def test_criterion_1_glcm_oracle(capsys):
    def run():
        rng = np.random.default_rng(0)
        for _ in range(200):
            t = int(rng.choice([3, 5, 7]))
            patch = rng.integers(0, 256, (t, t))
            mats = {}
            for alpha in (2, 3, 4):
                q = kem.reduce_gray(patch, alpha)
                got = kem.cooccurrence_counts(q, 2 ** alpha)
                want = _brute_counts(q, 2 ** alpha)
                assert np.array_equal(got, want), "pair counts not exact"
                mats[alpha], _ = kem.cooccurrence(q, 2 ** alpha)
            f = kem.features_from_cooc(mats)
            ref = _straight_line_features(mats)
            err = np.abs(f - ref).max()
            assert err < 1e-12, f"feature mismatch {err:.2e}"
        return "200 patches: counts exact, features to 1e-12"
    _gate(capsys, "criterion 1 glcm oracle", run)


# --- 2. gradient suite -------------------------------------------------------

def _check_layer_grads(rng):
    h = 1e-6
    x = rng.standard_normal((2, 8, 8))
    up = rng.standard_normal((3, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b = rng.standard_normal(3)
    gx, gw, gb = nd.conv2d_backward(x, w, up)
    checks = [("conv.x", x, gx, lambda: (nd.conv2d_forward(x, w, b) * up).sum()),
              ("conv.w", w, gw, lambda: (nd.conv2d_forward(x, w, b) * up).sum()),
              ("conv.b", b, gb, lambda: (nd.conv2d_forward(x, w, b) * up).sum())]

    wd = rng.standard_normal((2, 3, 2, 2)) * 0.5
    bd = rng.standard_normal(3)
    upd = rng.standard_normal((3, 16, 16))
    gxd, gwd, gbd = nd.deconv2d_backward(x, wd, upd)
    checks += [("deconv.x", x, gxd,
                lambda: (nd.deconv2d_forward(x, wd, bd) * upd).sum()),
               ("deconv.w", wd, gwd,
                lambda: (nd.deconv2d_forward(x, wd, bd) * upd).sum())]

    vec = rng.standard_normal(6)
    wf = rng.standard_normal((4, 6)) * 0.5
    bf = rng.standard_normal(4)
    upf = rng.standard_normal(4)
    gv, gwf, gbf = nd.dense_backward(vec, wf, upf)
    checks += [("dense.x", vec, gv,
                lambda: (nd.dense_forward(vec, wf, bf) * upf).sum()),
               ("dense.w", wf, gwf,
                lambda: (nd.dense_forward(vec, wf, bf) * upf).sum())]

    gates = nd.sigmoid(rng.standard_normal(2))
    upg = rng.standard_normal((2, 8, 8))
    gcat, ggate = nd.channel_gate_backward(x, gates, upg)
    checks += [("gate.x", x, gcat, lambda: (nd.channel_gate(x, gates) * upg).sum()),
               ("gate.g", gates, ggate,
                lambda: (nd.channel_gate(x, gates) * upg).sum())]

    for name, arr, analytic, f in checks:
        flat = arr.ravel()
        ga = analytic.ravel()
        for i in np.random.default_rng(1).choice(flat.size,
                                                 min(4, flat.size), replace=False):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            rel = abs(fd - ga[i]) / max(1e-6, abs(fd), abs(ga[i]))
            assert rel <= 1e-4, f"{name}[{i}] rel err {rel:.2e}"


def _check_network_grads(rng):
    cfg = dbsfnet.ModelConfig(input_size=8, base_channels=2, depth=2)
    params = dbsfnet.init_params(cfg, seed=int(rng.integers(1 << 31)))
    # jitter off zero-init biases so no pre-activation sits on the ReLU kink
    for k in params:
        params[k] = params[k] + 0.05 * rng.standard_normal(params[k].shape)
    visual = rng.random((3, 8, 8))
    feats = rng.standard_normal((8, 8, 8))
    mask = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    cache = {}
    logits = dbsfnet.forward(visual, feats, params, cfg, cache)
    _, glog = trainer.loss(logits, mask)
    grads = dbsfnet.backward(glog, params, cfg, cache)
    h = 1e-5
    for key in ("visual.s1.conv1.w", "visual.s2.conv2.b", "stat.s1.conv1.w",
                "fs.s2.w", "fs.s1.b", "dec.s2.conv.w", "dec.s1.deconv.w",
                "head.w", "head.b"):
        flat = params[key].ravel()
        i = int(rng.integers(0, flat.size))
        orig = flat[i]
        flat[i] = orig + h
        lp, _ = trainer.loss(dbsfnet.forward(visual, feats, params, cfg), mask)
        flat[i] = orig - h
        lm, _ = trainer.loss(dbsfnet.forward(visual, feats, params, cfg), mask)
        flat[i] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[key].ravel()[i]
        rel = abs(fd - an) / max(1e-6, abs(fd), abs(an))
        assert rel <= 1e-4, f"{key}[{i}] rel err {rel:.2e}"


def test_criterion_2_gradient_suite(capsys):
    def run():
        for seed in range(20):
            rng = np.random.default_rng(seed)
            _check_layer_grads(rng)
            _check_network_grads(rng)
        return "20 seeds: all layers + full network within 1e-4 of FD"
    _gate(capsys, "criterion 2 gradient suite", run)


# --- 3. metric hand-check ----------------------------------------------------

def test_criterion_3_metric_handcheck(capsys):
    def run():
        rep = metrics.metrics_from_confusion(
            metrics.ConfusionCounts(50, 10, 20, 920))
        assert abs(rep.csi - 0.625) < 1e-4, f"csi {rep.csi}"
        assert abs(rep.f1 - 0.7692) < 1e-4, f"f1 {rep.f1}"
        assert abs(rep.miou - 0.7967) < 1e-4, f"miou {rep.miou}"
        rng = np.random.default_rng(0)
        for _ in range(1000):
            c = metrics.ConfusionCounts(*(int(x) for x in rng.integers(0, 99, 4)))
            r = metrics.metrics_from_confusion(c)
            assert r.miou == (r.csi + r.back_iou) / 2.0, "miou identity broken"
        return "worked example to 1e-4; miou identity exact on 1000 tuples"
    _gate(capsys, "criterion 3 metric hand-check", run)


# --- 4. parameter audit ------------------------------------------------------

def test_criterion_4_parameter_audit(capsys):
    def run():
        cfg = dbsfnet.ModelConfig(input_size=256, base_channels=64, depth=5)
        counts = dict(dbsfnet.param_counts(cfg, "visual"))
        listed = {"visual.s1.conv1": 1792, "visual.s1.conv2": 36928,
                  "visual.s2.conv1": 73856, "visual.s2.conv2": 147584,
                  "visual.s3.conv1": 295168, "visual.s3.conv2": 590080,
                  "visual.s5.conv1": 2359808, "visual.s5.conv2": 2359808}
        for path, want in listed.items():
            assert counts[path] == want, f"{path}: {counts[path]} != {want}"
        return "full-scale visual branch matches all listed layer counts"
    _gate(capsys, "criterion 4 parameter audit", run)


# --- 5. overfit smoke test ---------------------------------------------------

def _overfit_run():
    params = dataio.SceneParams(size=64, seed=21)
    image, mask = dataio.synth_scene(params)
    cfg = dbsfnet.ModelConfig(input_size=64, base_channels=8, depth=4)
    tc = trainer.TrainConfig(lr0=0.01, total_iters=200, batch_size=1, seed=0,
                             p_noise=0, p_rotate=0, p_erase=0, eval_every=200)
    return trainer.train([(image, mask)], [], cfg, tc)


def test_criterion_5_overfit_smoke(capsys):
    def run():
        a = _overfit_run()
        final = a.log[-1][2]
        assert final < 0.05, f"final loss {final:.4f} >= 0.05"
        b = _overfit_run()
        for k in a.params:
            assert np.array_equal(a.params[k], b.params[k]), \
                f"rerun differs in {k}"
        return f"loss {final:.4f} after 200 steps; rerun bitwise identical"
    _gate(capsys, "criterion 5 overfit smoke", run)


# --- 6. synthetic benchmark --------------------------------------------------

BENCH_ITERS = 150


def test_criterion_6_synthetic_benchmark(capsys, tmp_path):
    def run():
        t0 = time.perf_counter()
        out = str(tmp_path / "bench")
        man = dataio.generate_dataset(out, n_events=40, n_frames=8,
                                      size=64, seed=7)
        tr = dataio.load_split(man, "train", out)
        va = dataio.load_split(man, "val", out)
        te = dataio.load_split(man, "test", out)
        good = 0
        gaps = []
        for seed in range(5):
            tc = trainer.TrainConfig(lr0=0.005, total_iters=BENCH_ITERS,
                                     batch_size=6, seed=seed, p_noise=0,
                                     p_rotate=0, p_erase=0, eval_every=100)
            csi = {}
            for name, use_stat in (("dual", True), ("visual", False)):
                mc = dbsfnet.ModelConfig(input_size=64, base_channels=8,
                                         depth=4, use_statistical=use_stat)
                res = trainer.train(tr, va, mc, tc)
                _, csi[name] = trainer.evaluate_samples(te, res.params, mc)
            gaps.append(csi["dual"] - csi["visual"])
            good += csi["dual"] >= 0.6 and gaps[-1] >= 0.03
        dt = time.perf_counter() - t0
        assert good >= 4, f"only {good}/5 seeds met CSI>=0.6 and gap>=0.03 " \
                          f"(gaps {['%.3f' % g for g in gaps]})"
        assert dt < 600, f"benchmark took {dt:.0f}s >= 600s"
        return f"{good}/5 seeds good, gaps {['%.3f' % g for g in gaps]}, {dt:.0f}s"
    _gate(capsys, "criterion 6 synthetic benchmark", run)


# --- 7. curve consistency ----------------------------------------------------

def test_criterion_7_curve_consistency(capsys):
    def run():
        rng = np.random.default_rng(0)
        probs = rng.random((64, 64))
        truth = (rng.random((64, 64)) > 0.7).astype(np.uint8)
        rows, _ = metrics.curves([probs], [truth], num_thresholds=101)
        row = next(r for r in rows if r[0] == 0.5)
        rep = metrics.metrics_from_confusion(
            metrics.confusion((probs >= 0.5).astype(np.uint8), truth))
        assert row[1] == rep.precision and row[2] == rep.recall, \
            "threshold-0.5 point disagrees with mask metrics"
        big = rng.random(100000)
        labels = (rng.random(100000) > 0.5).astype(np.uint8)
        _, auc = metrics.curves([big], [labels])
        assert abs(auc - 0.5) < 0.02, f"random AUC {auc:.4f}"
        return f"0.5-threshold point exact; random AUC {auc:.4f}"
    _gate(capsys, "criterion 7 curve consistency", run)


# --- 8. performance ----------------------------------------------------------

def test_criterion_8_performance(capsys):
    def run():
        rng = np.random.default_rng(0)
        image = rng.integers(0, 256, (3, 256, 256)).astype(np.float64)
        # warm the JIT on a small input before timing
        kem.kem_transform(image[:, :16, :16], t=7, levels=(2, 3, 4), threads=8)
        t0 = time.perf_counter()
        multi = kem.kem_transform(image, t=7, levels=(2, 3, 4), threads=8)
        dt = time.perf_counter() - t0
        single = kem.kem_transform(image, t=7, levels=(2, 3, 4), threads=1)
        assert np.array_equal(multi, single), "thread count changes output"
        assert dt < 2.0, f"256x256 extraction took {dt:.2f}s >= 2s"
        return f"256x256 in {dt:.2f}s with 8 threads; bitwise equal to 1 thread"
    _gate(capsys, "criterion 8 performance", run)
