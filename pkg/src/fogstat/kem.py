"""Knowledge extraction: per-pixel co-occurrence statistics.

Converts a visual image into an 8-channel stack of texture features
(mean, variance, homogeneity, contrast, dissimilarity, entropy, energy,
correlation), computed from gray-level co-occurrence matrices of the
t x t neighborhood of every pixel, at several reduced gray levels and
four neighbor directions.

Two implementations are provided:

* a plain reference path (``extract_patch`` -> ``reduce_gray`` ->
  ``cooccurrence`` -> ``features_from_cooc``), used as the oracle in tests;
* a numba-compiled row-parallel kernel behind ``kem_transform`` that must
  agree with the composition of the reference functions.
"""

from __future__ import annotations

import numpy as np
import numba
from numba import njit, prange

from .errors import ConfigError, ShapeError

FEATURE_NAMES = (
    "mean", "variance", "homogeneity", "contrast",
    "dissimilarity", "entropy", "energy", "correlation",
)

# neighbor offsets (row, col): right, down, down-right, up-right
OFFSETS = ((0, 1), (1, 0), (1, 1), (-1, 1))

_VAR_GUARD = 1e-12


def grayscale(image):
    """Per-pixel channel mean of a (C,H,W) image with values in [0,255]."""
    if image.ndim != 3:
        raise ShapeError(f"expected (C,H,W) image, got shape {image.shape}")
    return image.mean(axis=0)


def _reflect(k, n):
    # mirror about the edges without repeating the edge sample
    while k < 0 or k >= n:
        if k < 0:
            k = -k
        else:
            k = 2 * (n - 1) - k
    return k


def extract_patch(gray, center, t):
    """t x t window centered on a pixel, reflected at image borders."""
    if t % 2 == 0 or t < 3:
        raise ConfigError(f"patch side must be odd and >= 3, got {t}")
    h, w = gray.shape
    r, c = center
    half = t // 2
    rows = [_reflect(r + dr, h) for dr in range(-half, half + 1)]
    cols = [_reflect(c + dc, w) for dc in range(-half, half + 1)]
    return gray[np.ix_(rows, cols)]


def reduce_gray(patch, alpha):
    """Requantize [0,255] values to 2**alpha gray levels.

    Uses ceil((x + 1) * 2^(alpha - 8)) - 1, which is monotone and maps
    0 -> 0 and 255 -> 2**alpha - 1.
    """
    if not 1 <= alpha <= 8:
        raise ConfigError(f"gray-level bit depth must be in [1, 8], got {alpha}")
    patch = np.asarray(patch, dtype=np.float64)
    q = np.ceil((patch + 1.0) * 2.0 ** (alpha - 8)).astype(np.int64) - 1
    return np.clip(q, 0, 2 ** alpha - 1)


def cooccurrence_counts(qpatch, levels):
    """Symmetrized integer pair counts, one (levels x levels) matrix per offset."""
    qpatch = np.asarray(qpatch)
    h, w = qpatch.shape
    counts = np.zeros((len(OFFSETS), levels, levels), dtype=np.int64)
    for l, (dr, dc) in enumerate(OFFSETS):
        for i in range(max(0, -dr), h - max(0, dr)):
            for j in range(max(0, -dc), w - max(0, dc)):
                m = qpatch[i, j]
                n = qpatch[i + dr, j + dc]
                counts[l, m, n] += 1
                counts[l, n, m] += 1
    return counts


def cooccurrence(qpatch, levels):
    """Normalized co-occurrence matrix averaged over the four directions.

    Each direction's symmetric count matrix is normalized to sum 1 before
    averaging. Directions with no valid pair (degenerate patches) are
    skipped; if no direction has pairs the uniform matrix is returned with
    the degenerate flag set.

    Returns (matrix, degenerate).
    """
    counts = cooccurrence_counts(qpatch, levels)
    mat = np.zeros((levels, levels))
    nvalid = 0
    for l in range(counts.shape[0]):
        total = counts[l].sum()
        if total > 0:
            mat += counts[l] / total
            nvalid += 1
    if nvalid == 0:
        return np.full((levels, levels), 1.0 / levels ** 2), True
    return mat / nvalid, False


def features_from_cooc(mats):
    """The 8 statistical features from co-occurrence matrices per gray level.

    `mats` maps bit depth alpha -> normalized matrix. Each feature is the
    average of its per-level value over all levels. Mean, variance and
    correlation are computed per level with that level's own mean (level
    value ranges differ, so a cross-level mean would be incoherent);
    correlation falls back to 1 when a level's variance vanishes
    (constant patch).
    """
    alphas = sorted(mats)
    n_levels = len(alphas)

    mean = variance = correlation = 0.0
    homogeneity = contrast = dissimilarity = entropy = energy = 0.0
    for a in alphas:
        q = mats[a]
        g = q.shape[0]
        m_idx, n_idx = np.meshgrid(np.arange(g, dtype=np.float64),
                                   np.arange(g, dtype=np.float64), indexing="ij")
        mu = (q * m_idx).sum()
        var = (q * (m_idx - mu) ** 2).sum()
        mean += mu
        variance += var
        homogeneity += (q / (1.0 + (m_idx - n_idx) ** 2)).sum()
        contrast += (q * (m_idx - n_idx) ** 2).sum()
        dissimilarity += (q * np.abs(m_idx - n_idx)).sum()
        nz = q > 0
        entropy -= (q[nz] * np.log(q[nz])).sum()
        energy += (q ** 2).sum()
        if var < _VAR_GUARD:
            correlation += 1.0
        else:
            correlation += (q * (m_idx - mu) * (n_idx - mu)).sum() / var
    return np.array([mean, variance, homogeneity, contrast, dissimilarity,
                     entropy, energy, correlation]) / n_levels


@njit(parallel=True, cache=True)
def _kem_kernel(quant, gs, t, out):  # pragma: no cover - exercised via kem_transform
    n_levels, hp, wp = quant.shape
    height = hp - (t - 1)
    width = wp - (t - 1)
    gmax = int(gs.max())
    biases = np.array(((0, 1), (1, 0), (1, 1), (-1, 1)), dtype=np.int64)
    for i in prange(height):
        qbuf = np.empty((n_levels, gmax, gmax))
        cnt = np.empty((gmax, gmax))
        for j in range(width):
            for a in range(n_levels):
                g = gs[a]
                for m in range(g):
                    for n in range(g):
                        qbuf[a, m, n] = 0.0
                for l in range(4):
                    dr = biases[l, 0]
                    dc = biases[l, 1]
                    for m in range(g):
                        for n in range(g):
                            cnt[m, n] = 0.0
                    total = 0.0
                    for pi in range(max(0, -dr), t - max(0, dr)):
                        for pj in range(max(0, -dc), t - max(0, dc)):
                            m = quant[a, i + pi, j + pj]
                            n = quant[a, i + pi + dr, j + pj + dc]
                            cnt[m, n] += 1.0
                            cnt[n, m] += 1.0
                            total += 2.0
                    for m in range(g):
                        for n in range(g):
                            qbuf[a, m, n] += cnt[m, n] / total
                for m in range(gmax):
                    for n in range(gmax):
                        qbuf[a, m, n] /= 4.0

            mean = 0.0
            variance = 0.0
            corr = 0.0
            homog = 0.0
            contrast = 0.0
            dissim = 0.0
            entropy = 0.0
            energy = 0.0
            for a in range(n_levels):
                g = gs[a]
                mu = 0.0
                for m in range(g):
                    for n in range(g):
                        q = qbuf[a, m, n]
                        d = float(m - n)
                        mu += m * q
                        homog += q / (1.0 + d * d)
                        contrast += q * d * d
                        dissim += q * abs(d)
                        energy += q * q
                        if q > 0.0:
                            entropy -= q * np.log(q)
                var = 0.0
                for m in range(g):
                    for n in range(g):
                        dm = float(m) - mu
                        var += qbuf[a, m, n] * dm * dm
                mean += mu
                variance += var
                if var < 1e-12:
                    corr += 1.0
                else:
                    cv = 0.0
                    for m in range(g):
                        for n in range(g):
                            cv += (qbuf[a, m, n] * (float(m) - mu)
                                   * (float(n) - mu))
                    corr += cv / var
            mean /= n_levels
            variance /= n_levels
            corr /= n_levels
            homog /= n_levels
            contrast /= n_levels
            dissim /= n_levels
            entropy /= n_levels
            energy /= n_levels
            out[0, i, j] = mean
            out[1, i, j] = variance
            out[2, i, j] = homog
            out[3, i, j] = contrast
            out[4, i, j] = dissim
            out[5, i, j] = entropy
            out[6, i, j] = energy
            out[7, i, j] = corr


def standardize_stack(stack):
    """Zero-mean / unit-variance per channel; flat channels become all-zero."""
    out = np.empty_like(stack)
    for c in range(stack.shape[0]):
        ch = stack[c]
        mu = ch.mean()
        sd = ch.std()
        out[c] = (ch - mu) / sd if sd > _VAR_GUARD else ch - mu
    return out


def kem_transform(image, t=7, levels=(2, 3, 4), threads=None, standardize=True):
    """Full-image 8-channel feature stack via the compiled row-parallel kernel.

    image: (C,H,W) with values in [0,255]. Borders are handled by reflecting
    the grayscale image before quantization, so every pixel sees a full
    t x t patch. With `standardize` each output channel is rescaled to zero
    mean / unit variance over the image.
    """
    levels = tuple(sorted(levels))
    if not levels:
        raise ConfigError("need at least one gray level")
    for a in levels:
        if not 1 <= a <= 8:
            raise ConfigError(f"gray-level bit depth must be in [1, 8], got {a}")
    if t % 2 == 0 or t < 3:
        raise ConfigError(f"patch side must be odd and >= 3, got {t}")
    gray = grayscale(np.asarray(image, dtype=np.float64))
    half = t // 2
    padded = np.pad(gray, half, mode="reflect")
    quant = np.stack([reduce_gray(padded, a) for a in levels])
    gs = np.array([2 ** a for a in levels], dtype=np.int64)
    out = np.empty((8, gray.shape[0], gray.shape[1]))

    prev = numba.get_num_threads()
    if threads is not None:
        numba.set_num_threads(max(1, min(threads, numba.config.NUMBA_NUM_THREADS)))
    try:
        _kem_kernel(quant, gs, t, out)
    finally:
        if threads is not None:
            numba.set_num_threads(prev)
    return standardize_stack(out) if standardize else out


def kem_transform_reference(image, t=7, levels=(2, 3, 4), standardize=False):
    """Per-pixel composition of the reference operations. Slow; tests only."""
    levels = tuple(sorted(levels))
    gray = grayscale(np.asarray(image, dtype=np.float64))
    h, w = gray.shape
    out = np.empty((8, h, w))
    for i in range(h):
        for j in range(w):
            patch = extract_patch(gray, (i, j), t)
            mats = {}
            for a in levels:
                qp = reduce_gray(patch, a)
                mats[a], _ = cooccurrence(qp, 2 ** a)
            out[:, i, j] = features_from_cooc(mats)
    return standardize_stack(out) if standardize else out
