"""Dual-branch encoder/decoder for fog segmentation.

Two VGG-style encoder branches (visual RGB and 8-channel statistical
features, parameters not shared) feed a decoder that at every scale gates
the concatenation of encoder features and the running fused feature with a
squeeze-excitation style channel-selection block, then restores resolution
with a conv + stride-2 transposed conv. The output head is a 1x1 conv to K
class logits; the prediction mask thresholds the class-1 softmax
probability.

Forward and backward passes are wired by hand from the ndtensor layer set;
parameters live in a flat dict keyed by layer path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import ndtensor as nd
from .errors import ConfigError, ShapeError
from .kem import FEATURE_NAMES

CKPT_MAGIC = b"FGS1"


@dataclass
class ModelConfig:
    """Geometry and behavior switches for the network.

    fuse_scales: encoder scales (1-based) at which statistical features are
    concatenated into the decoder; "all" means every scale. Setting
    use_statistical=False yields the visual-only variant used as the
    ablation baseline.
    """
    input_size: int = 64
    base_channels: int = 8
    depth: int = 4
    num_classes: int = 2
    threshold: float = 0.5
    use_statistical: bool = True
    use_feature_selection: bool = True
    fuse_scales: object = "all"
    feature_channels: tuple = FEATURE_NAMES
    decoder_kernel: int = 3
    patch: int = 7
    levels: tuple = (2, 3, 4)

    def __post_init__(self):
        if self.input_size % (2 ** self.depth) != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by 2^depth={2**self.depth}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.decoder_kernel % 2 == 0:
            raise ConfigError("decoder kernel size must be odd")
        self.feature_channels = tuple(self.feature_channels)
        self.levels = tuple(self.levels)
        unknown = set(self.feature_channels) - set(FEATURE_NAMES)
        if unknown:
            raise ConfigError(f"unknown statistical features: {sorted(unknown)}")

    def width(self, stage):
        """Channel width at encoder stage (1-based); doubles, capped at 8x base."""
        return self.base_channels * min(2 ** (stage - 1), 8)

    def fused(self, stage):
        if not self.use_statistical:
            return False
        if self.fuse_scales == "all":
            return True
        return stage in set(self.fuse_scales)

    @property
    def stat_channels(self):
        return len(self.feature_channels)

    def cat_width(self, stage):
        """Channels entering the selection block at a decoder scale."""
        parts = 1 if stage == self.depth else 2  # theta (+ psi above the deepest)
        parts += 1 if self.fused(stage) else 0
        return parts * self.width(stage)

    def decoder_out_width(self, stage):
        return self.width(max(stage - 1, 1))

    def to_dict(self):
        d = asdict(self)
        d["feature_channels"] = list(self.feature_channels)
        d["levels"] = list(self.levels)
        if d["fuse_scales"] != "all":
            d["fuse_scales"] = list(d["fuse_scales"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("fuse_scales") != "all":
            d["fuse_scales"] = tuple(d["fuse_scales"])
        d["feature_channels"] = tuple(d.get("feature_channels", FEATURE_NAMES))
        d["levels"] = tuple(d.get("levels", (2, 3, 4)))
        return cls(**d)


def _branch_specs(config, branch):
    """Conv layer paths and (in, out) channels for one encoder branch."""
    in_ch = 3 if branch == "visual" else config.stat_channels
    specs = []
    prev = in_ch
    for s in range(1, config.depth + 1):
        w = config.width(s)
        specs.append((f"{branch}.s{s}.conv1", prev, w))
        specs.append((f"{branch}.s{s}.conv2", w, w))
        prev = w
    return specs


def param_counts(config, branch="visual"):
    """Learnable-parameter count per conv layer of one encoder branch."""
    k = 3
    return [(path, (cin * k * k + 1) * cout)
            for path, cin, cout in _branch_specs(config, branch)]


def init_params(config, seed=0):
    """He-style uniform init for every layer path, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    k = config.decoder_kernel
    params = {}

    def conv(path, cin, cout, ksize):
        fan = cin * ksize * ksize
        params[f"{path}.w"] = nd.he_uniform((cout, cin, ksize, ksize), fan, rng)
        params[f"{path}.b"] = np.zeros(cout)

    branches = ["visual"] + (["stat"] if config.use_statistical else [])
    for branch in branches:
        for path, cin, cout in _branch_specs(config, branch):
            conv(path, cin, cout, 3)

    for s in range(config.depth, 0, -1):
        ccat = config.cat_width(s)
        if config.use_feature_selection:
            params[f"fs.s{s}.w"] = nd.he_uniform((ccat, ccat), ccat, rng)
            params[f"fs.s{s}.b"] = np.zeros(ccat)
        cout = config.decoder_out_width(s)
        conv(f"dec.s{s}.conv", ccat, cout, k)
        params[f"dec.s{s}.deconv.w"] = nd.he_uniform((cout, cout, 2, 2), cout, rng)
        params[f"dec.s{s}.deconv.b"] = np.zeros(cout)

    conv("head", config.decoder_out_width(1), config.num_classes, 1)
    return params


def encode_branch(x, branch, params, config, cache=None):
    """Run one encoder branch; returns the per-stage (post-pool) feature list."""
    expect = 3 if branch == "visual" else config.stat_channels
    if x.shape[0] != expect:
        raise ShapeError(
            f"{branch} branch expects {expect} input channels, got {x.shape[0]}")
    feats = []
    h = x
    for s in range(1, config.depth + 1):
        p = f"{branch}.s{s}"
        z1 = nd.conv2d_forward(h, params[f"{p}.conv1.w"], params[f"{p}.conv1.b"])
        a1 = nd.relu(z1)
        z2 = nd.conv2d_forward(a1, params[f"{p}.conv2.w"], params[f"{p}.conv2.b"])
        a2 = nd.relu(z2)
        pooled, idx = nd.maxpool2d_forward(a2)
        if cache is not None:
            cache[p] = (h, z1, a1, z2, a2.shape, idx)
        h = pooled
        feats.append(h)
    return feats


def _encode_branch_backward(gfeats, branch, params, config, cache, grads):
    """Backprop one branch given gradients w.r.t. each stage output."""
    gout = gfeats[config.depth - 1]
    for s in range(config.depth, 0, -1):
        p = f"{branch}.s{s}"
        h, z1, a1, z2, a2_shape, idx = cache[p]
        g = nd.maxpool2d_backward(gout, idx, a2_shape)
        g = nd.relu_backward(z2, g)
        g, gw2, gb2 = nd.conv2d_backward(a1, params[f"{p}.conv2.w"], g)
        g = nd.relu_backward(z1, g)
        g, gw1, gb1 = nd.conv2d_backward(h, params[f"{p}.conv1.w"], g)
        grads[f"{p}.conv2.w"] = gw2
        grads[f"{p}.conv2.b"] = gb2
        grads[f"{p}.conv1.w"] = gw1
        grads[f"{p}.conv1.b"] = gb1
        if s > 1:
            gout = g + gfeats[s - 2]
    return gout


def feature_select(theta, psi, eps, weights, bias):
    """Channel-selection block: gate the concatenation by sigmoid-dense(GAP).

    psi and eps may be None (the deepest fusion has no running fused feature;
    unfused scales carry no statistical feature). Returns (output, cache).
    """
    parts = [t for t in (theta, psi, eps) if t is not None]
    cat = nd.concat_channels(parts)
    gvec = nd.gap(cat)
    gates = nd.sigmoid(nd.dense_forward(gvec, weights, bias))
    out = nd.channel_gate(cat, gates)
    return out, (cat, gvec, gates, [p.shape[0] for p in parts])


def forward(visual, feats, params, config, cache=None):
    """Full network forward pass; returns logits of shape (K, H, W).

    `feats` is the statistical feature stack (ignored when the config is
    visual-only). Pass a dict as `cache` to enable `backward`.
    """
    if visual.shape[1] != config.input_size or visual.shape[2] != config.input_size:
        raise ShapeError(
            f"visual input {visual.shape[1:]} != configured size {config.input_size}")
    theta = encode_branch(visual, "visual", params, config, cache)
    eps = None
    if config.use_statistical:
        if feats is None:
            raise ShapeError("config expects a statistical feature stack")
        eps = encode_branch(feats, "stat", params, config, cache)

    psi = None
    for s in range(config.depth, 0, -1):
        th = theta[s - 1]
        ep = eps[s - 1] if config.fused(s) else None
        parts = [t for t in (th, psi, ep) if t is not None]
        if config.use_feature_selection:
            z, fs_cache = feature_select(
                th, psi, ep, params[f"fs.s{s}.w"], params[f"fs.s{s}.b"])
        else:
            z = nd.concat_channels(parts) if len(parts) > 1 else parts[0]
            fs_cache = None
        zc = nd.conv2d_forward(z, params[f"dec.s{s}.conv.w"],
                               params[f"dec.s{s}.conv.b"])
        ac = nd.relu(zc)
        zd = nd.deconv2d_forward(ac, params[f"dec.s{s}.deconv.w"],
                                 params[f"dec.s{s}.deconv.b"])
        new_psi = nd.relu(zd)
        if cache is not None:
            cache[f"dec.s{s}"] = (z, fs_cache, zc, ac, zd,
                                  [p.shape[0] for p in parts], psi is not None,
                                  ep is not None)
        psi = new_psi

    logits = nd.conv2d_forward(psi, params["head.w"], params["head.b"])
    if cache is not None:
        cache["head_in"] = psi
    return logits


def backward(glogits, params, config, cache):
    """Backprop through the whole network; returns dict of parameter grads."""
    grads = {}
    gpsi, grads["head.w"], grads["head.b"] = nd.conv2d_backward(
        cache["head_in"], params["head.w"], glogits)

    gtheta = [None] * config.depth
    geps = [None] * config.depth
    for s in range(1, config.depth + 1):
        z, fs_cache, zc, ac, zd, part_sizes, has_psi, has_eps = cache[f"dec.s{s}"]
        gzd = nd.relu_backward(zd, gpsi)
        gac, gwd, gbd = nd.deconv2d_backward(ac, params[f"dec.s{s}.deconv.w"], gzd)
        grads[f"dec.s{s}.deconv.w"] = gwd
        grads[f"dec.s{s}.deconv.b"] = gbd
        gzc = nd.relu_backward(zc, gac)
        gz, gwc, gbc = nd.conv2d_backward(z, params[f"dec.s{s}.conv.w"], gzc)
        grads[f"dec.s{s}.conv.w"] = gwc
        grads[f"dec.s{s}.conv.b"] = gbc

        if fs_cache is not None:
            cat, gvec, gates, _ = fs_cache
            gcat, ggates = nd.channel_gate_backward(cat, gates, gz)
            gpre = nd.sigmoid_backward(gates, ggates)
            ggap, gwf, gbf = nd.dense_backward(gvec, params[f"fs.s{s}.w"], gpre)
            grads[f"fs.s{s}.w"] = gwf
            grads[f"fs.s{s}.b"] = gbf
            gcat = gcat + nd.gap_backward(ggap, cat.shape)
        else:
            gcat = gz

        pieces = nd.split_channels(gcat, part_sizes)
        gtheta[s - 1] = pieces[0]
        at = 1
        gpsi = None
        if has_psi:
            gpsi = pieces[at]
            at += 1
        if has_eps:
            geps[s - 1] = pieces[at]

    _encode_branch_backward(
        [g if g is not None else 0.0 for g in gtheta],
        "visual", params, config, cache, grads)
    if config.use_statistical:
        # unfused scales contribute no gradient into the statistical branch
        filled = []
        for s in range(1, config.depth + 1):
            g = geps[s - 1]
            if g is None:
                sz = config.input_size // (2 ** s)
                g = np.zeros((config.width(s), sz, sz))
            filled.append(g)
        _encode_branch_backward(filled, "stat", params, config, cache, grads)
    return grads


def predict_mask(logits, threshold=0.5):
    """Binary mask: 1 where the class-1 softmax probability reaches the threshold."""
    if logits.shape[0] != 2:
        raise ShapeError(f"predict_mask expects 2 logit channels, got {logits.shape[0]}")
    prob = nd.softmax_channels(logits)[1]
    return (prob >= threshold).astype(np.uint8)


# --- checkpoint serialization ---------------------------------------------

def save_checkpoint(path, params, config):
    """Write config + parameter tensors: magic, u32 JSON length, JSON header
    (config and per-path blob offsets), then concatenated NDT1 records."""
    blobs = bytearray()
    index = {}
    for key in sorted(params):
        index[key] = len(blobs)
        blobs += nd.ndt_to_bytes(params[key])
    header = json.dumps({"config": config.to_dict(), "index": index}).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(header)) + header + bytes(blobs))


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CKPT_MAGIC:
        raise ShapeError("not a fogstat checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8:8 + hlen].decode())
    config = ModelConfig.from_dict(header["config"])
    base = 8 + hlen
    params = {}
    for key, off in header["index"].items():
        params[key], _ = nd.ndt_from_bytes(buf, base + off)
    return params, config
