"""Dense CHW tensors and the hand-written differentiable layer set.

Every layer is a pair of pure functions: a forward pass and a backward pass
that consumes the upstream gradient and returns gradients for the input and
every parameter. No autodiff tape -- the network module wires these by hand.
All arithmetic is float64 so the finite-difference checks in the test suite
are meaningful.

Tensor convention: a feature map is a numpy array of shape
(channels, height, width). Convolution weights are (out_ch, in_ch, kh, kw);
transposed-convolution weights are (in_ch, out_ch, kh, kw).
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "conv2d_forward", "conv2d_backward",
    "maxpool2d_forward", "maxpool2d_backward",
    "deconv2d_forward", "deconv2d_backward",
    "gap", "gap_backward",
    "dense_forward", "dense_backward",
    "relu", "relu_backward", "sigmoid", "sigmoid_backward",
    "softmax_channels", "concat_channels", "split_channels",
    "channel_gate", "channel_gate_backward",
    "he_uniform", "save_ndt", "load_ndt", "ndt_to_bytes", "ndt_from_bytes",
]


def _check_chw(x, name="input"):
    if x.ndim != 3:
        raise ShapeError(f"{name} must be rank-3 (C,H,W), got shape {x.shape}")


def _pad_amount(kh, kw, padding):
    if padding == "same":
        return kh // 2, kw // 2
    if padding == "valid":
        return 0, 0
    raise ShapeError(f"unknown padding policy {padding!r}")


def _im2col(x, kh, kw, stride, padding):
    """Return (padded input, column tensor of shape (C, kh, kw, Ho, Wo))."""
    c, h, w = x.shape
    ph, pw = _pad_amount(kh, kw, padding)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {xp.shape}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C, H', W', kh, kw)
    win = win[:, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2))
    return xp, cols, (ph, pw, ho, wo)


def conv2d_forward(x, weights, bias, stride=1, padding="same"):
    """2-D cross-correlation over a CHW tensor.

    `padding` is "same" (zero padding, preserves H and W at stride 1) or
    "valid". Kernel spatial dims must be odd.
    """
    _check_chw(x)
    o, ci, kh, kw = weights.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd, got {kh}x{kw}")
    if ci != x.shape[0]:
        raise ShapeError(
            f"input has {x.shape[0]} channels but kernel expects {ci}")
    if bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)")
    _, cols, (_, _, ho, wo) = _im2col(x, kh, kw, stride, padding)
    y = weights.reshape(o, -1) @ cols.reshape(ci * kh * kw, ho * wo)
    y += bias[:, None]
    return y.reshape(o, ho, wo)


def conv2d_backward(x, weights, upstream, stride=1, padding="same"):
    """Gradients of conv2d_forward. Returns (input_grad, weight_grad, bias_grad)."""
    o, ci, kh, kw = weights.shape
    xp, cols, (ph, pw, ho, wo) = _im2col(x, kh, kw, stride, padding)
    if upstream.shape != (o, ho, wo):
        raise ShapeError(
            f"upstream shape {upstream.shape} != forward output ({o},{ho},{wo})")
    g = upstream.reshape(o, ho * wo)
    gw = (g @ cols.reshape(ci * kh * kw, ho * wo).T).reshape(weights.shape)
    gb = g.sum(axis=1)
    gcols = (weights.reshape(o, -1).T @ g).reshape(ci, kh, kw, ho, wo)
    gxp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kw):
            gxp[:, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, a, b]
    if ph or pw:
        gx = gxp[:, ph:ph + x.shape[1], pw:pw + x.shape[2]]
    else:
        gx = gxp
    return gx, gw, gb


def maxpool2d_forward(x):
    """2x2 max pooling with stride 2. Returns (pooled, argmax indices).

    The indices (values 0..3, position within each window) are what the
    backward pass uses to route gradients.
    """
    _check_chw(x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"spatial dims must be even for 2x2 pooling, got {h}x{w}")
    win = x.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    win = win.reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=3)
    y = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    return y, idx


def maxpool2d_backward(upstream, idx, input_shape):
    c, h, w = input_shape
    gwin = np.zeros((c, h // 2, w // 2, 4))
    np.put_along_axis(gwin, idx[..., None], upstream[..., None], axis=3)
    return (gwin.reshape(c, h // 2, w // 2, 2, 2)
                .transpose(0, 1, 3, 2, 4).reshape(c, h, w))


def deconv2d_forward(x, weights, bias):
    """Transposed convolution with a 2x2 kernel and stride 2 (doubles H and W).

    weights: (in_ch, out_ch, 2, 2).
    """
    _check_chw(x)
    ci, o, kh, kw = weights.shape
    if (kh, kw) != (2, 2):
        raise ShapeError(f"transposed conv kernel must be 2x2, got {kh}x{kw}")
    if ci != x.shape[0]:
        raise ShapeError(
            f"input has {x.shape[0]} channels but kernel expects {ci}")
    _, h, w = x.shape
    y4 = np.einsum("chw,cokl->ohwkl", x, weights, optimize=True)
    y = y4.transpose(0, 1, 3, 2, 4).reshape(o, 2 * h, 2 * w)
    return y + bias[:, None, None]


def deconv2d_backward(x, weights, upstream):
    ci, o, _, _ = weights.shape
    _, h, w = x.shape
    if upstream.shape != (o, 2 * h, 2 * w):
        raise ShapeError(
            f"upstream shape {upstream.shape} != ({o},{2*h},{2*w})")
    g4 = upstream.reshape(o, h, 2, w, 2).transpose(0, 1, 3, 2, 4)
    gx = np.einsum("ohwkl,cokl->chw", g4, weights, optimize=True)
    gw = np.einsum("chw,ohwkl->cokl", x, g4, optimize=True)
    gb = upstream.sum(axis=(1, 2))
    return gx, gw, gb


def gap(x):
    """Global average pooling: per-channel spatial mean."""
    _check_chw(x)
    return x.mean(axis=(1, 2))


def gap_backward(upstream, input_shape):
    c, h, w = input_shape
    return np.broadcast_to(upstream[:, None, None] / (h * w), input_shape).copy()


def dense_forward(v, weights, bias):
    """Affine map over a flat vector. weights: (out, in)."""
    if weights.shape[1] != v.shape[0]:
        raise ShapeError(
            f"input length {v.shape[0]} != dense fan-in {weights.shape[1]}")
    return weights @ v + bias


def dense_backward(v, weights, upstream):
    gw = np.outer(upstream, v)
    gb = upstream.copy()
    gv = weights.T @ upstream
    return gv, gw, gb


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    return upstream * (x > 0)


def sigmoid(x):
    # Split by sign to stay overflow-free for large |x|.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, upstream):
    """Backward given the forward *output* y."""
    return upstream * y * (1.0 - y)


def softmax_channels(x):
    """Per-pixel softmax over the channel axis, stabilized by max subtraction."""
    _check_chw(x)
    if x.shape[0] < 2:
        raise ShapeError("softmax over channels needs at least 2 channels")
    z = x - x.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def concat_channels(tensors):
    spatial = {t.shape[1:] for t in tensors}
    if len(spatial) != 1:
        raise ShapeError(f"cannot concatenate differing spatial sizes {spatial}")
    return np.concatenate(tensors, axis=0)


def split_channels(x, sizes):
    """Inverse of concat_channels; used to route gradients back per input."""
    if sum(sizes) != x.shape[0]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[0]} channels")
    out, at = [], 0
    for s in sizes:
        out.append(x[at:at + s])
        at += s
    return out


def channel_gate(x, gates):
    """Hadamard product of a CHW tensor with one scalar gate per channel."""
    if gates.shape != (x.shape[0],):
        raise ShapeError(f"gate vector {gates.shape} != channels ({x.shape[0]},)")
    return x * gates[:, None, None]


def channel_gate_backward(x, gates, upstream):
    gx = upstream * gates[:, None, None]
    ggates = (upstream * x).sum(axis=(1, 2))
    return gx, ggates


def he_uniform(shape, fan_in, rng):
    """Uniform He-style init with fan-in scaling."""
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


# --- NDT1 binary tensor format -------------------------------------------
# magic "NDT1", u32 rank, u32 dims[rank], float64 payload, all little-endian.

_MAGIC = b"NDT1"


def ndt_to_bytes(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = _MAGIC + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def ndt_from_bytes(buf, offset=0):
    """Decode one NDT1 record. Returns (array, next offset)."""
    if buf[offset:offset + 4] != _MAGIC:
        raise ShapeError("not an NDT1 record (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    dims = struct.unpack_from(f"<{rank}I", buf, offset + 8)
    start = offset + 8 + 4 * rank
    n = int(np.prod(dims)) if rank else 1
    end = start + 8 * n
    if end > len(buf):
        raise ShapeError("truncated NDT1 record")
    arr = np.frombuffer(buf[start:end], dtype="<f8").reshape(dims).copy()
    return arr, end


def save_ndt(path, arr):
    with open(path, "wb") as f:
        f.write(ndt_to_bytes(arr))


def load_ndt(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, _ = ndt_from_bytes(buf)
    return arr
