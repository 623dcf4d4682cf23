"""Neural-net kernels: conv2d, norms, activations, bilinear upsampling.

Convolution is cross-correlation (no kernel flip) computed as k*k shifted
GEMMs, which keeps peak memory at the input's size instead of the im2col
blowup. Both norms use biased variance. Bilinear interpolation uses the
half-pixel center convention and is expressed as two small interpolation
matrices applied along H and W, so forward and backward are plain matmuls.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import DTYPE, Tensor, _wrap, add, matmul, maximum_scalar, transpose


@dataclass
class Conv2dParams:
    weight: Tensor  # [C_out, C_in, k, k]
    bias: Tensor  # [C_out]
    stride: int = 1
    padding: int = 0


@dataclass
class BatchNorm2dParams:
    gamma: Tensor  # [C]
    beta: Tensor  # [C]
    running_mean: Tensor  # [C], not trainable
    running_var: Tensor  # [C], not trainable
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class LayerNormParams:
    gamma: Tensor  # [D]
    beta: Tensor  # [D]
    eps: float = 1e-5


@dataclass
class LinearParams:
    weight: Tensor  # [D_out, D_in]
    bias: Tensor  # [D_out]


def init_conv2d(rng, c_in: int, c_out: int, k: int, stride: int = 1, padding: int = 0) -> Conv2dParams:
    bound = 1.0 / np.sqrt(c_in * k * k)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(DTYPE)
    return Conv2dParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(c_out, dtype=DTYPE), requires_grad=True),
        stride=stride,
        padding=padding,
    )


def init_batch_norm2d(c: int, eps: float = 1e-5, momentum: float = 0.1) -> BatchNorm2dParams:
    return BatchNorm2dParams(
        gamma=Tensor(np.ones(c, dtype=DTYPE), requires_grad=True),
        beta=Tensor(np.zeros(c, dtype=DTYPE), requires_grad=True),
        running_mean=Tensor(np.zeros(c, dtype=DTYPE)),
        running_var=Tensor(np.ones(c, dtype=DTYPE)),
        eps=eps,
        momentum=momentum,
    )


def init_layer_norm(d: int, eps: float = 1e-5) -> LayerNormParams:
    return LayerNormParams(
        gamma=Tensor(np.ones(d, dtype=DTYPE), requires_grad=True),
        beta=Tensor(np.zeros(d, dtype=DTYPE), requires_grad=True),
        eps=eps,
    )


def init_linear(rng, d_in: int, d_out: int) -> LinearParams:
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_out, d_in)).astype(DTYPE)
    return LinearParams(
        weight=Tensor(w, requires_grad=True),
        bias=Tensor(np.zeros(d_out, dtype=DTYPE), requires_grad=True),
    )


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Cross-correlate [B,C_in,H,W] with p.weight, add bias.

    Output spatial dims are floor((H + 2*pad - k)/stride) + 1.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-d input, got shape {x.shape}")
    wd, bd = p.weight.data, p.bias.data
    b, c_in, h, w = xd.shape
    c_out, c_w, kh, kw = wd.shape
    if c_w != c_in:
        raise ShapeError(f"conv2d: input has {c_in} channels, weight expects {c_w}")
    s, pad = p.stride, p.padding
    h_out = (h + 2 * pad - kh) // s + 1
    w_out = (w + 2 * pad - kw) // s + 1
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    hp, wp = xp.shape[2], xp.shape[3]

    acc = np.zeros((c_out, b, h_out, w_out), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i : i + s * (h_out - 1) + 1 : s, j : j + s * (w_out - 1) + 1 : s]
            acc += np.tensordot(wd[:, :, i, j], window, axes=([1], [1]))
    out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3)) + bd.reshape(1, c_out, 1, 1)

    need_x = x.requires_grad
    need_w = p.weight.requires_grad

    def rule(g):
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3))
        g_bias = g.sum(axis=(0, 2, 3), dtype=DTYPE)
        g_weight = np.zeros_like(wd) if need_w else None
        g_xp = np.zeros((c_in, b, hp, wp), dtype=DTYPE) if need_x else None
        for i in range(kh):
            for j in range(kw):
                if need_w:
                    window = xp[:, :, i : i + s * (h_out - 1) + 1 : s, j : j + s * (w_out - 1) + 1 : s]
                    g_weight[:, :, i, j] = np.tensordot(gt, window, axes=([1, 2, 3], [0, 2, 3]))
                if need_x:
                    g_xp[:, :, i : i + s * (h_out - 1) + 1 : s, j : j + s * (w_out - 1) + 1 : s] += np.tensordot(
                        wd[:, :, i, j], gt, axes=([0], [0])
                    )
        g_x = None
        if need_x:
            g_x = np.ascontiguousarray(g_xp.transpose(1, 0, 2, 3))
            if pad:
                g_x = np.ascontiguousarray(g_x[:, :, pad : pad + h, pad : pad + w])
        return g_x, g_weight, g_bias

    return _wrap(out, (x, p.weight, p.bias), rule)


def batch_norm2d(x: Tensor, p: BatchNorm2dParams, mode: str) -> Tensor:
    """Per-channel normalization of [B,C,H,W] with affine (gamma, beta).

    Train mode normalizes by batch mean / biased batch variance and folds
    those into the running stats; eval mode uses the running stats only.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"batch_norm2d mode must be 'train' or 'eval', got {mode!r}")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError(f"batch_norm2d expects a 4-d input, got shape {x.shape}")
    b, c, h, w = xd.shape
    if p.gamma.shape != (c,):
        raise ShapeError(f"batch_norm2d: gamma shape {p.gamma.shape} does not match {c} channels")
    gd, bd = p.gamma.data, p.beta.data
    eps = DTYPE(p.eps)

    if mode == "train":
        n = b * h * w
        if n < 2:
            raise ContractError("batch_norm2d train mode needs at least 2 values per channel")
        mu = xd.mean(axis=(0, 2, 3), dtype=DTYPE)
        var = xd.var(axis=(0, 2, 3), dtype=DTYPE)
        mom = DTYPE(p.momentum)
        p.running_mean.data = (1 - mom) * p.running_mean.data + mom * mu
        p.running_var.data = (1 - mom) * p.running_var.data + mom * var
    else:
        mu = p.running_mean.data
        var = p.running_var.data

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = gd.reshape(1, c, 1, 1) * xhat + bd.reshape(1, c, 1, 1)

    if mode == "train":

        def rule(g):
            n_f = DTYPE(1.0 / (b * h * w))
            g_gamma = (g * xhat).sum(axis=(0, 2, 3), dtype=DTYPE)
            g_beta = g.sum(axis=(0, 2, 3), dtype=DTYPE)
            g_xhat = g * gd.reshape(1, c, 1, 1)
            sum_g = g_xhat.sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE)
            sum_gx = (g_xhat * xhat).sum(axis=(0, 2, 3), keepdims=True, dtype=DTYPE)
            g_x = inv.reshape(1, c, 1, 1) * (g_xhat - n_f * sum_g - xhat * (n_f * sum_gx))
            return g_x, g_gamma, g_beta

    else:

        def rule(g):
            g_gamma = (g * xhat).sum(axis=(0, 2, 3), dtype=DTYPE)
            g_beta = g.sum(axis=(0, 2, 3), dtype=DTYPE)
            g_x = g * (gd * inv).reshape(1, c, 1, 1)
            return g_x, g_gamma, g_beta

    return _wrap(out, (x, p.gamma, p.beta), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (biased variance), then affine."""
    d = x.shape[-1]
    if d < 2:
        raise ContractError(f"layer_norm needs last dim >= 2, got {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} do not match dim {d}")
    xd, gd, bd = x.data, gamma.data, beta.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=DTYPE)
    var = xd.var(axis=-1, keepdims=True, dtype=DTYPE)
    inv = 1.0 / np.sqrt(var + DTYPE(eps))
    xhat = (xd - mu) * inv
    out = gd * xhat + bd
    reduce_axes = tuple(range(xd.ndim - 1))
    inv_d = DTYPE(1.0 / d)

    def rule(g):
        g_gamma = (g * xhat).sum(axis=reduce_axes, dtype=DTYPE)
        g_beta = g.sum(axis=reduce_axes, dtype=DTYPE)
        g_xhat = g * gd
        sum_g = g_xhat.sum(axis=-1, keepdims=True, dtype=DTYPE)
        sum_gx = (g_xhat * xhat).sum(axis=-1, keepdims=True, dtype=DTYPE)
        g_x = inv * (g_xhat - inv_d * sum_g - xhat * (inv_d * sum_gx))
        return g_x, g_gamma, g_beta

    return _wrap(out, (x, gamma, beta), rule)


def relu(x: Tensor) -> Tensor:
    return maximum_scalar(x, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g):
        return (g * out * (1.0 - out),)

    return _wrap(out, (x,), rule)


GELU_COEFF = 0.7978845608  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    xd = x.data
    inner = DTYPE(GELU_COEFF) * (xd + DTYPE(0.044715) * xd * xd * xd)
    t = np.tanh(inner)
    out = DTYPE(0.5) * xd * (1.0 + t)

    def rule(g):
        d_inner = DTYPE(GELU_COEFF) * (1.0 + 3.0 * DTYPE(0.044715) * xd * xd)
        return (g * (DTYPE(0.5) * (1.0 + t) + DTYPE(0.5) * xd * (1.0 - t * t) * d_inner),)

    return _wrap(out, (x,), rule)


def softmax_last(x: Tensor) -> Tensor:
    """Numerically-stable softmax over the last axis."""
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True, dtype=DTYPE)

    def rule(g):
        dot = (g * out).sum(axis=-1, keepdims=True, dtype=DTYPE)
        return (out * (g - dot),)

    return _wrap(out, (x,), rule)


@lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] bilinear interpolation matrix.

    Source coordinate for output i is (i + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1]; each row blends the two nearest samples.
    When n_out == n_in the matrix is exactly the identity.
    """
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.minimum(i0 + 1, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=DTYPE)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0), (1.0 - frac).astype(DTYPE))
    np.add.at(mat, (rows, i1), frac.astype(DTYPE))
    return mat


def resize_bilinear_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel bilinear resize of [..,H,W] (plain array, any direction)."""
    h, w = arr.shape[-2], arr.shape[-1]
    ah = interp_matrix(h, out_h)
    aw = interp_matrix(w, out_w)
    lead = arr.shape[:-2]
    flat = arr.reshape(-1, h, w)
    out = np.matmul(np.matmul(ah, flat), aw.T)
    return np.ascontiguousarray(out.reshape(*lead, out_h, out_w), dtype=DTYPE)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Upsample [B,C,H,W] to [B,C,out_h,out_w] (half-pixel centers)."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear_upsample expects a 4-d input, got shape {x.shape}")
    b, c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_upsample: output dims {out_h}x{out_w} must be positive")
    if out_h < h or out_w < w:
        raise ShapeError(f"bilinear_upsample is upsample-only: {h}x{w} -> {out_h}x{out_w}")
    ah = interp_matrix(h, out_h)
    aw = interp_matrix(w, out_w)
    flat = x.data.reshape(b * c, h, w)
    out = np.matmul(np.matmul(ah, flat), aw.T).reshape(b, c, out_h, out_w)

    def rule(g):
        g_flat = g.reshape(b * c, out_h, out_w)
        g_x = np.matmul(ah.T, np.matmul(g_flat, aw)).reshape(b, c, h, w)
        return (g_x,)

    return _wrap(np.ascontiguousarray(out), (x,), rule)


def concat_channels(xs) -> Tensor:
    """Concatenate [B,C_i,H,W] tensors along the channel axis."""
    xs = list(xs)
    if not xs:
        raise ShapeError("concat_channels needs at least one input")
    first = xs[0]
    for t in xs:
        if t.ndim != 4:
            raise ShapeError(f"concat_channels expects 4-d inputs, got shape {t.shape}")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(f"concat_channels: {t.shape} does not align with {first.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    channels = [t.shape[1] for t in xs]

    def rule(g):
        grads = []
        offset = 0
        for ch in channels:
            grads.append(g[:, offset : offset + ch])
            offset += ch
        return tuple(grads)

    return _wrap(out, tuple(xs), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias for x [..,D_in], weight [D_out,D_in]."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} does not match weight {weight.shape}")
    return add(matmul(x, transpose(weight, (1, 0))), bias)
