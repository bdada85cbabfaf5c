"""Forward/backward primitives for the convolutional network.

Every layer is a pair of pure functions: ``*_forward`` returns the output
plus an opaque cache, ``*_backward`` consumes that cache and the upstream
gradient. Arrays keep the caller's dtype, so the same code runs the
float32 training path and the float64 gradient checks.

Tensors are NCHW throughout.
"""

from __future__ import annotations

import numpy as np


def _as4d(x):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"expected NCHW tensor, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# 3x3 convolution, stride 1, same padding


def _im2col3(x):
    """(N,C,H,W) -> column view (N, C*9, H*W) of the zero-padded input."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (N, C, H, W, 3, 3) -> (N, C, 3, 3, H, W) -> (N, C*9, H*W)
    return windows.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * 9, h * w)


def conv3x3_forward(x, w, b):
    x = _as4d(x)
    n, c, h, width = x.shape
    f = w.shape[0]
    cols = _im2col3(x)
    w2 = w.reshape(f, c * 9)
    out = np.einsum("fk,nkl->nfl", w2, cols, optimize=True) + b[None, :, None]
    return out.reshape(n, f, h, width), (cols, w, x.shape)


def conv3x3_backward(cache, dout):
    cols, w, x_shape = cache
    n, c, h, width = x_shape
    f = w.shape[0]
    d2 = dout.reshape(n, f, h * width)
    dw = np.einsum("nfl,nkl->fk", d2, cols, optimize=True).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.einsum("fk,nfl->nkl", w.reshape(f, c * 9), d2, optimize=True)
    dcols = dcols.reshape(n, c, 3, 3, h, width)
    dxp = np.zeros((n, c, h + 2, width + 2), dtype=dout.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky:ky + h, kx:kx + width] += dcols[:, :, ky, kx]
    return dxp[:, :, 1:-1, 1:-1], dw, db


# ---------------------------------------------------------------------------
# 1x1 convolution


def conv1x1_forward(x, w, b):
    x = _as4d(x)
    out = np.einsum("fc,nchw->nfhw", w[:, :, 0, 0], x, optimize=True)
    out += b[None, :, None, None]
    return out, (x, w)


def conv1x1_backward(cache, dout):
    x, w = cache
    dw = np.einsum("nfhw,nchw->fc", dout, x, optimize=True)[:, :, None, None]
    db = dout.sum(axis=(0, 2, 3))
    dx = np.einsum("fc,nfhw->nchw", w[:, :, 0, 0], dout, optimize=True)
    return dx, dw, db


# ---------------------------------------------------------------------------
# Batch normalization (per channel over N, H, W)


def bn_forward_train(x, gamma, beta, running_mean, running_var,
                     momentum=0.1, eps=1e-5):
    """Normalize with batch statistics; blend them into the running stats.

    Returns (out, cache, new_running_mean, new_running_var). Batch
    variance is the biased estimate, both for normalization and for the
    running average.
    """
    x = _as4d(x)
    axes = (0, 2, 3)
    mu = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    new_rm = (1.0 - momentum) * running_mean + momentum * mu
    new_rv = (1.0 - momentum) * running_var + momentum * var
    cache = (xhat, gamma, inv_std)
    return out, cache, new_rm.astype(running_mean.dtype), new_rv.astype(running_var.dtype)


def bn_forward_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    x = _as4d(x)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    scale = (gamma * inv_std)[None, :, None, None]
    shift = (beta - gamma * running_mean * inv_std)[None, :, None, None]
    return x * scale + shift


def bn_backward(cache, dout):
    """Gradient through train-mode batch normalization."""
    xhat, gamma, inv_std = cache
    axes = (0, 2, 3)
    m = dout.shape[0] * dout.shape[2] * dout.shape[3]
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma[None, :, None, None]
    mean_dxhat = dxhat.mean(axis=axes)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
    dx = inv_std[None, :, None, None] * (
        dxhat
        - mean_dxhat[None, :, None, None]
        - xhat * mean_dxhat_xhat[None, :, None, None])
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# ReLU


def relu_forward(x):
    x = _as4d(x)
    mask = x > 0
    return x * mask, mask


def relu_backward(cache, dout):
    return dout * cache


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2


def maxpool2_forward(x):
    x = _as4d(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    tiles = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    tiles = tiles.reshape(n, c, h // 2, w // 2, 4)
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(cache, dout):
    idx, x_shape = cache
    n, c, h, w = x_shape
    dtiles = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dtiles, idx[..., None], dout[..., None], axis=-1)
    dtiles = dtiles.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dtiles.reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# Nearest-neighbor 2x upsampling


def upsample2_forward(x):
    x = _as4d(x)
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(dout):
    n, c, h, w = dout.shape
    return dout.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# Channel concatenation


def concat_forward(a, b):
    return np.concatenate([a, b], axis=1), a.shape[1]


def concat_backward(cache, dout):
    split = cache
    return dout[:, :split], dout[:, split:]
