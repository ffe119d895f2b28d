"""Dataset plumbing: PPM/PGM files, event-grouped manifests, synthetic scenes.

The synthetic generator stands in for proprietary satellite imagery. Scenes
composite a dark sea background with bright smooth-textured fog blobs
(positive class) and equally bright but fine-grain-noisy cloud blobs
(negative class), so the two classes separate in co-occurrence statistics
but overlap in raw intensity. Events are 8-frame sequences with slowly
drifting blobs, reproducing the frame-correlation hazard that makes
event-grouped splitting necessary.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import kem
from .errors import ConfigError, DataError

SPLIT_NAMES = ("train", "val", "test")


# --- PPM / PGM --------------------------------------------------------------

def _read_header(f, magic):
    if f.read(2) != magic:
        raise DataError(f"bad magic, expected {magic.decode()}")
    vals = []
    while len(vals) < 3:
        tok = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":  # comment line
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if not tok.isdigit():
            raise DataError(f"malformed header token {tok!r}")
        vals.append(int(tok))
    return vals  # width, height, maxval


def save_ppm(path, image):
    """Write a (3,H,W) image with values in [0,255] as binary PPM."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise DataError(f"PPM image must be (3,H,W), got {image.shape}")
    data = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = image.shape[1:]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(data.transpose(1, 2, 0).tobytes())


def load_ppm(path):
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P6")
        if maxval != 255:
            raise DataError(f"unsupported PPM maxval {maxval}")
        raw = f.read(3 * w * h)
    if len(raw) != 3 * w * h:
        raise DataError(f"truncated PPM payload in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64)


def save_pgm(path, gray):
    """Write a (H,W) array with values in [0,255] as binary PGM."""
    data = np.clip(np.rint(np.asarray(gray)), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())


def save_mask(path, mask):
    save_pgm(path, np.asarray(mask).astype(np.uint8) * 255)


def load_pgm(path):
    with open(path, "rb") as f:
        w, h, maxval = _read_header(f, b"P5")
        if maxval != 255:
            raise DataError(f"unsupported PGM maxval {maxval}")
        raw = f.read(w * h)
    if len(raw) != w * h:
        raise DataError(f"truncated PGM payload in {path}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).astype(np.float64)


def load_mask(path):
    """Load a strictly binary mask; any value outside {0, 255} is rejected."""
    g = load_pgm(path)
    vals = set(np.unique(g).astype(int))
    if not vals <= {0, 255}:
        raise DataError(f"mask {path} is not binary, found values {sorted(vals)}")
    return (g > 0).astype(np.uint8)


# --- events and manifests ----------------------------------------------------

@dataclass
class FogEvent:
    event_id: str
    frames: list  # of (image_path, mask_path)


def split_by_event(events, fractions, seed):
    """Random event-level partition into train/val/test.

    All frames of one event land in one split; fractions must sum to 1.
    Sizes use the largest-remainder rule so exact fractions are honored.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions {fractions} do not sum to 1")
    if len(fractions) != 3:
        raise ConfigError("expected three fractions (train, val, test)")
    n = len(events)
    if n < sum(1 for f in fractions if f > 0):
        raise ConfigError(f"only {n} events for {len(fractions)} splits")
    ideal = [f * n for f in fractions]
    sizes = [int(x) for x in ideal]
    rema = sorted(range(3), key=lambda i: ideal[i] - sizes[i], reverse=True)
    for i in range(n - sum(sizes)):
        sizes[rema[i % 3]] += 1
    order = list(np.random.default_rng(seed).permutation(n))
    splits = {}
    at = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        splits[name] = [events[i] for i in order[at:at + size]]
        at += size
    return splits


def validate_manifest(manifest):
    """Reject any event- or frame-level leakage between splits."""
    seen_events = {}
    seen_frames = {}
    for name in SPLIT_NAMES:
        for ev in manifest["splits"].get(name, []):
            eid = ev["event_id"]
            if eid in seen_events and seen_events[eid] != name:
                raise DataError(
                    f"event {eid} appears in both {seen_events[eid]} and {name}")
            seen_events[eid] = name
            for fr in ev["frames"]:
                for path in (fr["image"], fr["mask"]):
                    if path in seen_frames and seen_frames[path] != name:
                        raise DataError(f"frame {path} leaks across splits")
                    seen_frames[path] = name


def save_manifest(path, splits, image_size, seed):
    manifest = {
        "splits": {
            name: [{"event_id": ev.event_id,
                    "frames": [{"image": i, "mask": m} for i, m in ev.frames]}
                   for ev in events]
            for name, events in splits.items()
        },
        "image_size": image_size,
        "seed": seed,
    }
    validate_manifest(manifest)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest


def load_manifest(path):
    with open(path) as f:
        manifest = json.load(f)
    if "splits" not in manifest:
        raise DataError(f"{path} is not a dataset manifest")
    validate_manifest(manifest)
    return manifest


def load_split(manifest, name, base_dir=""):
    """Materialize one split as a list of (image, mask) arrays."""
    samples = []
    for ev in manifest["splits"].get(name, []):
        for fr in ev["frames"]:
            samples.append((load_ppm(os.path.join(base_dir, fr["image"])),
                            load_mask(os.path.join(base_dir, fr["mask"]))))
    return samples


# --- synthetic scenes ---------------------------------------------------------

@dataclass
class SceneParams:
    size: int = 64
    n_fog: int = 2
    fog_scale: float = 0.30
    n_cloud: int = 2
    cloud_scale: float = 0.28
    fog_level: float = 175.0
    cloud_level: float = 175.0
    fog_texture_amp: float = 10.0
    fog_blur: float = 4.0  # blur radius for the smooth fog texture, px
    cloud_noise_amp: float = 55.0
    sea_level: float = 55.0
    noise_floor: float = 3.0
    drift: float = 1.5  # px/frame blob drift within an event
    seed: int = 0


def _blob_specs(rng, params):
    """Ellipse geometry and drift velocities for one scene/event."""
    specs = []
    s = params.size
    for kind, count, scale in (("fog", params.n_fog, params.fog_scale),
                               ("cloud", params.n_cloud, params.cloud_scale)):
        for _ in range(count):
            specs.append({
                "kind": kind,
                "center": rng.uniform(0.15 * s, 0.85 * s, size=2),
                "radii": scale * s * rng.uniform(0.55, 1.1, size=2),
                "angle": rng.uniform(0, np.pi),
                "vel": rng.uniform(-params.drift, params.drift, size=2),
            })
    return specs


def _ellipse_region(spec, size, frame):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = spec["center"] + frame * spec["vel"]
    ca, sa = np.cos(spec["angle"]), np.sin(spec["angle"])
    dy, dx = yy - cy, xx - cx
    u = (ca * dy + sa * dx) / spec["radii"][0]
    v = (-sa * dy + ca * dx) / spec["radii"][1]
    return u * u + v * v <= 1.0


def _smooth_field(rng, size, blur, amp, level):
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), blur)
    sd = f.std()
    if sd > 1e-12:
        f *= amp / sd
    return level + f


def _render_frame(rng, params, specs, frame):
    s = params.size
    gray = _smooth_field(rng, s, 2.0, params.noise_floor, params.sea_level)
    mask = np.zeros((s, s), dtype=np.uint8)
    for spec in specs:
        region = _ellipse_region(spec, s, frame)
        if spec["kind"] == "fog":
            fld = _smooth_field(rng, s, params.fog_blur,
                                params.fog_texture_amp, params.fog_level)
            gray[region] = fld[region]
            mask[region] = 1
        else:
            fld = _smooth_field(rng, s, params.fog_blur,
                                params.fog_texture_amp, params.cloud_level)
            fld += rng.uniform(-params.cloud_noise_amp,
                               params.cloud_noise_amp, size=(s, s))
            gray[region] = fld[region]
            mask[region] = 0
    gray = np.clip(gray, 0.0, 255.0)
    # three channels with slightly different gains, kept inside [0,255]
    image = np.stack([np.clip(gray * g, 0, 255) for g in (0.97, 1.0, 1.02)])
    return np.rint(image), mask


def _texture_check(image, mask, params):
    """Generator self-check: fog interiors must beat cloud interiors on the
    co-occurrence homogeneity channel."""
    # cloud pixels are the bright non-fog pixels
    bright = image.mean(axis=0) > (params.sea_level + params.fog_level) / 2.0
    fog = mask.astype(bool)
    cloud = bright & ~fog
    if not fog.any() or not cloud.any():
        return True
    hom = kem.kem_transform(image, t=5, levels=(2, 3), standardize=False)[2]
    erode = ndimage.binary_erosion(fog, iterations=3)
    fog_in = erode if erode.any() else fog
    erodec = ndimage.binary_erosion(cloud, iterations=3)
    cloud_in = erodec if erodec.any() else cloud
    return hom[fog_in].mean() > hom[cloud_in].mean()


def synth_scene(params):
    """One synthetic scene: (image (3,H,W) in [0,255], binary fog mask).

    Deterministic in the seed. Regenerates (up to 5 attempts) when the
    texture self-check fails; persistent failure is a parameter error.
    """
    for attempt in range(5):
        rng = np.random.default_rng((params.seed, attempt))
        specs = _blob_specs(rng, params)
        image, mask = _render_frame(rng, params, specs, frame=0)
        if _texture_check(image, mask, params):
            return image, mask
    raise ConfigError("scene parameters fail the fog/cloud texture self-check")


def synth_event(params, n_frames=8):
    """An event: n_frames scenes sharing blob geometry, blobs drifting."""
    if not 1 <= n_frames <= 8:
        raise ConfigError(f"events carry 1-8 frames, got {n_frames}")
    for attempt in range(5):
        rng = np.random.default_rng((params.seed, attempt))
        specs = _blob_specs(rng, params)
        frames = [_render_frame(rng, params, specs, f) for f in range(n_frames)]
        if all(_texture_check(img, msk, params) for img, msk in frames):
            return frames
    raise ConfigError("event parameters fail the fog/cloud texture self-check")


def generate_dataset(out_dir, n_events=40, n_frames=8, size=64, seed=7,
                     fractions=(0.6, 0.2, 0.2), scene_params=None):
    """Write a full synthetic dataset + manifest.json; returns the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    master = np.random.default_rng(seed)
    events = []
    for e in range(n_events):
        params = scene_params if scene_params is not None else SceneParams()
        params = SceneParams(**{**asdict(params),
                                "size": size,
                                "seed": int(master.integers(2 ** 31)),
                                "n_fog": int(master.integers(1, 4)),
                                "n_cloud": int(master.integers(1, 4))})
        frames = synth_event(params, n_frames)
        paths = []
        for f, (image, mask) in enumerate(frames):
            img_path = f"ev{e:03d}_f{f}.ppm"
            msk_path = f"ev{e:03d}_f{f}.mask.pgm"
            save_ppm(os.path.join(out_dir, img_path), image)
            save_mask(os.path.join(out_dir, msk_path), mask)
            paths.append((img_path, msk_path))
        events.append(FogEvent(f"ev{e:03d}", paths))
    splits = split_by_event(events, fractions, seed)
    return save_manifest(os.path.join(out_dir, "manifest.json"),
                         splits, size, seed)
