"""Built-in oracle battery behind `fogstat selfcheck`.

Each check re-derives expected values from first principles (brute-force
enumeration, finite differences, hand-worked formulas) and compares the
library against them, reporting per-check timing.
"""

from __future__ import annotations

import time

import numpy as np

from . import dataio, dbsfnet, kem, metrics, ndtensor as nd


def _brute_pair_counts(qpatch, levels):
    """Exhaustive enumeration of every ordered neighbor pair, per direction."""
    h, w = qpatch.shape
    counts = np.zeros((4, levels, levels), dtype=np.int64)
    for l, (dr, dc) in enumerate(kem.OFFSETS):
        for i in range(h):
            for j in range(w):
                i2, j2 = i + dr, j + dc
                if 0 <= i2 < h and 0 <= j2 < w:
                    counts[l, qpatch[i, j], qpatch[i2, j2]] += 1
                    counts[l, qpatch[i2, j2], qpatch[i, j]] += 1
    return counts


def check_glcm_oracle(n_patches=30, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_patches):
        t = int(rng.choice([3, 5, 7]))
        alpha = int(rng.choice([2, 3, 4]))
        patch = rng.integers(0, 256, size=(t, t))
        q = kem.reduce_gray(patch, alpha)
        got = kem.cooccurrence_counts(q, 2 ** alpha)
        want = _brute_pair_counts(q, 2 ** alpha)
        if not np.array_equal(got, want):
            return False, "pair counts disagree with exhaustive enumeration"
    return True, f"{n_patches} random patches exact"


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    up = rng.standard_normal((3, 6, 6))
    gx, gw, gb = nd.conv2d_backward(x, w, up)
    h = 1e-6
    for _ in range(10):
        i = tuple(rng.integers(0, s) for s in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = ((nd.conv2d_forward(xp, w, b) - nd.conv2d_forward(xm, w, b)) * up
              ).sum() / (2 * h)
        if abs(fd - gx[i]) > 1e-4 * max(1.0, abs(fd)):
            return False, f"conv input grad mismatch at {i}"
    return True, "conv2d gradients match finite differences"


def check_metrics():
    rep = metrics.metrics_from_confusion(metrics.ConfusionCounts(50, 10, 20, 920))
    want = {"precision": 50 / 60, "recall": 50 / 70, "csi": 0.625,
            "f1": 2 * (50 / 60) * (50 / 70) / (50 / 60 + 50 / 70),
            "accuracy": 0.97, "back_iou": 920 / 950}
    for k, v in want.items():
        if abs(getattr(rep, k) - v) > 1e-9:
            return False, f"{k}: got {getattr(rep, k)}, want {v}"
    if abs(rep.miou - (rep.csi + rep.back_iou) / 2) > 0:
        return False, "miou identity violated"
    return True, "hand-worked confusion example reproduced"


def check_manifest_disjoint():
    events = [dataio.FogEvent(f"e{i}", [(f"i{i}.ppm", f"m{i}.pgm")])
              for i in range(10)]
    splits = dataio.split_by_event(events, (0.6, 0.2, 0.2), seed=1)
    manifest = {"splits": {
        name: [{"event_id": ev.event_id,
                "frames": [{"image": i, "mask": m} for i, m in ev.frames]}
               for ev in evs]
        for name, evs in splits.items()}}
    dataio.validate_manifest(manifest)
    again = dataio.split_by_event(events, (0.6, 0.2, 0.2), seed=1)
    if [e.event_id for e in splits["train"]] != [e.event_id for e in again["train"]]:
        return False, "split not deterministic"
    return True, "event splits disjoint and deterministic"


def check_softmax():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 5, 5))
    p = nd.softmax_channels(x)
    if np.abs(p.sum(axis=0) - 1.0).max() > 1e-9:
        return False, "softmax rows do not sum to 1"
    shifted = nd.softmax_channels(x + 7.5)
    if np.abs(p - shifted).max() > 1e-12:
        return False, "softmax not shift invariant"
    return True, "softmax normalized and shift invariant"


def check_network_gradient():
    cfg = dbsfnet.ModelConfig(input_size=8, base_channels=2, depth=2)
    params = dbsfnet.init_params(cfg, seed=0)
    rng = np.random.default_rng(0)
    # jitter away from zero-init biases so no ReLU input sits exactly on the kink
    for k in params:
        params[k] = params[k] + 0.05 * rng.standard_normal(params[k].shape)
    visual = rng.random((3, 8, 8))
    feats = rng.standard_normal((8, 8, 8))
    mask = (rng.random((8, 8)) > 0.5).astype(np.uint8)
    from .trainer import loss
    cache = {}
    logits = dbsfnet.forward(visual, feats, params, cfg, cache)
    _, glog = loss(logits, mask)
    grads = dbsfnet.backward(glog, params, cfg, cache)
    h = 1e-5
    for key in ("visual.s1.conv1.w", "stat.s2.conv2.w", "fs.s1.w",
                "dec.s2.deconv.w", "head.w"):
        flat = params[key].ravel()
        i = int(rng.integers(0, flat.size))
        orig = flat[i]
        flat[i] = orig + h
        lp, _ = loss(dbsfnet.forward(visual, feats, params, cfg), mask)
        flat[i] = orig - h
        lm, _ = loss(dbsfnet.forward(visual, feats, params, cfg), mask)
        flat[i] = orig
        fd = (lp - lm) / (2 * h)
        an = grads[key].ravel()[i]
        if abs(fd - an) > 1e-4 * max(1e-6, abs(fd), abs(an)):
            return False, f"{key}[{i}]: analytic {an} vs fd {fd}"
    return True, "end-to-end parameter gradients match finite differences"


CHECKS = [
    ("glcm_oracle", check_glcm_oracle),
    ("layer_gradients", check_gradients),
    ("network_gradients", check_network_gradient),
    ("metric_handcheck", check_metrics),
    ("manifest_disjointness", check_manifest_disjoint),
    ("softmax_properties", check_softmax),
]


def run_selfcheck(report=print):
    """Run every check; returns True iff all pass."""
    all_ok = True
    for name, fn in CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        dt = time.perf_counter() - t0
        all_ok &= ok
        report(f"[{'PASS' if ok else 'FAIL'}] {name:22s} {dt:7.3f}s  {detail}")
    return all_ok
