"""End-to-end optimization: loss, Adam, warmup + cosine schedule, augmentations.

Training is deterministic given the seed: minibatch sampling, init, and the
augmentation draws all come from one seeded generator, samples are processed
serially, and gradients accumulate in fixed order.
"""

from __future__ import annotations

import copy
import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import dbsfnet, kem, metrics
from .errors import ConfigError, NumericError
from .ndtensor import softmax_channels


@dataclass
class TrainConfig:
    lr0: float = 0.001
    total_iters: int = 500
    warmup_steps: int | None = None  # defaults to 5% of total_iters
    batch_size: int = 12
    seed: int = 0
    p_noise: float = 0.2
    p_rotate: float = 0.5
    p_erase: float = 0.2
    rotate_max_deg: float = 20.0
    speckle_amplitude: float = 0.15
    erase_frac: tuple = (0.05, 0.20)
    lr_floor_ratio: float = 0.01
    eval_every: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    kem_threads: int | None = None

    def __post_init__(self):
        if self.warmup_steps is None:
            self.warmup_steps = max(1, round(0.05 * self.total_iters))
        for p in (self.p_noise, self.p_rotate, self.p_erase):
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"augmentation probability {p} outside [0, 1]")
        if self.warmup_steps >= self.total_iters:
            raise ConfigError("warmup_steps must be < total_iters")


@dataclass
class TrainState:
    step: int
    params: dict
    m: dict
    v: dict
    rng: np.random.Generator
    loss_history: list = field(default_factory=list)
    diagnostic: str | None = None


def loss(logits, mask):
    """Mean per-pixel softmax cross-entropy. Returns (value, logits gradient)."""
    k, h, w = logits.shape
    p = softmax_channels(logits)
    mask = np.asarray(mask)
    onehot = np.zeros_like(p)
    for c in range(k):
        onehot[c] = mask == c
    picked = np.clip((p * onehot).sum(axis=0), 1e-300, None)
    value = -np.log(picked).mean()
    grad = (p - onehot) / (h * w)
    return value, grad


def lr_at(step, config):
    """Linear warmup to lr0, then cosine annealing down to lr0/100."""
    w = config.warmup_steps
    if step <= w:
        return config.lr0 * step / w
    floor = config.lr0 * config.lr_floor_ratio
    progress = min(1.0, (step - w) / (config.total_iters - w))
    return floor + (config.lr0 - floor) * 0.5 * (1.0 + np.cos(np.pi * progress))


def init_state(params, seed):
    return TrainState(
        step=0,
        params=params,
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
        rng=np.random.default_rng(seed),
    )


def adam_step(state, grads, config, lr=None):
    """One bias-corrected Adam update in place. Non-finite gradients abort the
    step (parameters untouched) and set the diagnostic flag."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            state.diagnostic = f"non-finite gradient in {k} at step {state.step + 1}"
            return state
    state.step += 1
    t = state.step
    if lr is None:
        lr = lr_at(t, config)
    b1, b2 = config.beta1, config.beta2
    for k, g in grads.items():
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1 ** t)
        vhat = state.v[k] / (1 - b2 ** t)
        state.params[k] -= lr * mhat / (np.sqrt(vhat) + config.adam_eps)
    return state


def augment(image, mask, rng, config):
    """The three training-time augmentations, applied in fixed order.

    Speckle noise (image only), rotation of image and mask by a uniform
    angle within +/-rotate_max_deg, and erasure of a random rectangle
    sized 5-20% of the foreground bounding box (image only).

    Returns (image, mask, changed) where `changed` reports whether the
    image differs from the input (lets callers reuse cached features).
    """
    changed = False
    if rng.random() < config.p_noise:
        a = config.speckle_amplitude
        image = np.clip(image * (1.0 + rng.uniform(-a, a, image.shape)), 0, 255)
        changed = True
    if rng.random() < config.p_rotate:
        angle = rng.uniform(-config.rotate_max_deg, config.rotate_max_deg)
        image = ndimage.rotate(image, angle, axes=(1, 2), reshape=False,
                               order=1, mode="reflect")
        image = np.clip(image, 0, 255)
        mask = ndimage.rotate(mask.astype(np.uint8), angle, reshape=False,
                              order=0, mode="reflect")
        changed = True
    if rng.random() < config.p_erase:
        fg = np.argwhere(mask > 0)
        if len(fg):
            (r0, c0), (r1, c1) = fg.min(axis=0), fg.max(axis=0) + 1
            frac = rng.uniform(*config.erase_frac)
            eh = max(1, round((r1 - r0) * np.sqrt(frac)))
            ew = max(1, round((c1 - c0) * np.sqrt(frac)))
            er = int(rng.integers(r0, max(r0 + 1, r1 - eh + 1)))
            ec = int(rng.integers(c0, max(c0 + 1, c1 - ew + 1)))
            image = image.copy()
            image[:, er:er + eh, ec:ec + ew] = 0.0
            changed = True
    return image, mask, changed


@dataclass
class TrainResult:
    params: dict
    config: dbsfnet.ModelConfig
    log: list
    diverged: bool
    final_val_csi: float | None


def _features_for(image, model_cfg, threads):
    return kem.kem_transform(image, t=model_cfg.patch, levels=model_cfg.levels,
                             threads=threads, standardize=True)


def evaluate_samples(samples, params, model_cfg, feats_cache=None, threads=None):
    """Mean loss and pooled CSI over a list of (image, mask) samples."""
    total_loss = 0.0
    conf = metrics.ConfusionCounts(0, 0, 0, 0)
    for i, (image, mask) in enumerate(samples):
        if feats_cache is not None and i in feats_cache:
            feats = feats_cache[i]
        else:
            feats = _features_for(image, model_cfg, threads) \
                if model_cfg.use_statistical else None
            if feats_cache is not None:
                feats_cache[i] = feats
        logits = dbsfnet.forward(image / 255.0, feats, params, model_cfg)
        val, _ = loss(logits, mask)
        total_loss += val
        pred = dbsfnet.predict_mask(logits, model_cfg.threshold)
        conf = conf + metrics.confusion(pred, mask)
    report = metrics.metrics_from_confusion(conf)
    return total_loss / len(samples), report.csi


def train(train_samples, val_samples, model_cfg, train_cfg, out_dir=None):
    """Full training run. Emits checkpoint + CSV loss/lr log when out_dir is set.

    Divergence (non-finite loss) aborts the run and restores the last
    snapshot taken at an evaluation point.
    """
    if not train_samples:
        raise ConfigError("empty training set")
    params = dbsfnet.init_params(model_cfg, seed=train_cfg.seed)
    state = init_state(params, train_cfg.seed)
    train_feat_cache = {}
    val_feat_cache = {}
    log = []
    diverged = False
    val_loss = val_csi = None
    last_good = copy.deepcopy(state.params)

    for it in range(1, train_cfg.total_iters + 1):
        idx = state.rng.integers(0, len(train_samples), size=train_cfg.batch_size)
        agg = None
        batch_loss = 0.0
        for i in idx:
            image, mask = train_samples[i]
            image, mask, changed = augment(image, mask, state.rng, train_cfg)
            if model_cfg.use_statistical:
                if changed or i not in train_feat_cache:
                    feats = _features_for(image, model_cfg, train_cfg.kem_threads)
                    if not changed:
                        train_feat_cache[i] = feats
                else:
                    feats = train_feat_cache[i]
            else:
                feats = None
            cache = {}
            logits = dbsfnet.forward(image / 255.0, feats, params, model_cfg, cache)
            lval, glogits = loss(logits, mask)
            batch_loss += lval
            grads = dbsfnet.backward(glogits, params, model_cfg, cache)
            if agg is None:
                agg = grads
            else:
                for k in agg:
                    agg[k] += grads[k]
        batch_loss /= len(idx)
        if not np.isfinite(batch_loss):
            state.params = last_good
            diverged = True
            break
        for k in agg:
            agg[k] /= len(idx)
        lr = lr_at(it, train_cfg)
        adam_step(state, agg, train_cfg, lr=lr)
        state.loss_history.append(batch_loss)

        if it % train_cfg.eval_every == 0 or it == train_cfg.total_iters:
            if val_samples:
                val_loss, val_csi = evaluate_samples(
                    val_samples, state.params, model_cfg,
                    feats_cache=val_feat_cache, threads=train_cfg.kem_threads)
            last_good = copy.deepcopy(state.params)
        log.append((it, lr, batch_loss,
                    val_loss if val_loss is not None else "",
                    val_csi if val_csi is not None else ""))

    result = TrainResult(state.params, model_cfg, log, diverged, val_csi)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        dbsfnet.save_checkpoint(os.path.join(out_dir, "model.fgs"),
                                state.params, model_cfg)
        with open(os.path.join(out_dir, "log.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "lr", "train_loss", "val_loss", "val_csi"])
            writer.writerows(log)
    if diverged:
        raise NumericError("training diverged (non-finite loss); "
                           "last good checkpoint restored" +
                           (f" and saved to {out_dir}" if out_dir else ""))
    return result
