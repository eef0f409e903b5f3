"""
Network primitives with hand-written backward passes.

Every forward returns (output, cache); the matching backward takes the
upstream gradient and the cache. Tensors are (N, C, D, H, W) for volumes and
(N, F) for fully connected layers. Convolutions use kernel 3, stride 1,
padding 1; max pooling uses kernel 2, stride 2 and ceil mode.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_SPATIAL = (2, 3, 4)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    windows = sliding_window_view(xp, (3, 3, 3), axis=_SPATIAL)  # (N, C, D, H, W, 3, 3, 3)
    out = np.tensordot(windows, w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))  # (N, D, H, W, O)
    out = np.moveaxis(out, -1, 1) + b.reshape(1, -1, 1, 1, 1)
    return np.ascontiguousarray(out), (windows, w)


def conv3d_backward(
    dy: np.ndarray, cache: tuple, need_dx: bool = True
) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    windows, w = cache
    dw = np.tensordot(dy, windows, axes=([0, 2, 3, 4], [0, 2, 3, 4]))  # (O, C, 3, 3, 3)
    db = dy.sum(axis=(0, 2, 3, 4))
    if not need_dx:
        return None, dw, db
    # The input gradient is a same-padded correlation with the flipped, transposed kernel.
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    dx, _ = conv3d_forward(dy, w_t, np.zeros(w_t.shape[0], dtype=dy.dtype))
    return dx, dw, db


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def batchnorm_forward(
    x: np.ndarray,
    gamma: np.ndarray,
    beta: np.ndarray,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = 1e-5,
) -> Tuple[np.ndarray, tuple, Tuple[np.ndarray, np.ndarray]]:
    """Per-channel batch norm. Returns (out, cache, (batch_mean, batch_var_unbiased))."""
    shape = (1, -1, 1, 1, 1)
    axes = (0,) + _SPATIAL
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        count = x.size // x.shape[1]
        unbiased = var * count / max(count - 1, 1)
    else:
        mean, var = running_mean, running_var
        unbiased = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * x_hat + beta.reshape(shape)
    return out, (x_hat, gamma, inv_std, train), (mean, unbiased)


def batchnorm_backward(dy: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_hat, gamma, inv_std, train = cache
    shape = (1, -1, 1, 1, 1)
    axes = (0,) + _SPATIAL
    dgamma = (dy * x_hat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dx_hat = dy * gamma.reshape(shape)
    if not train:
        return dx_hat * inv_std.reshape(shape), dgamma, dbeta
    m = dy.size // dy.shape[1]
    dx = (
        m * dx_hat
        - dx_hat.sum(axis=axes, keepdims=True)
        - x_hat * (dx_hat * x_hat).sum(axis=axes, keepdims=True)
    ) * (inv_std.reshape(shape) / m)
    return dx, dgamma, dbeta


def maxpool_forward(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    n, c, d, h, w = x.shape
    od, oh, ow = -(-d // 2), -(-h // 2), -(-w // 2)
    xp = np.full((n, c, 2 * od, 2 * oh, 2 * ow), -np.inf, dtype=x.dtype)
    xp[:, :, :d, :h, :w] = x
    blocks = xp.reshape(n, c, od, 2, oh, 2, ow, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, od, oh, ow, 8)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def maxpool_backward(dy: np.ndarray, cache: tuple) -> np.ndarray:
    arg, shape = cache
    n, c, d, h, w = shape
    od, oh, ow = dy.shape[2:]
    blocks = np.zeros((n, c, od, oh, ow, 8), dtype=dy.dtype)
    np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
    dxp = blocks.reshape(n, c, od, oh, ow, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, 2 * od, 2 * oh, 2 * ow)
    return np.ascontiguousarray(dxp[:, :, :d, :h, :w])


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """y = x W^T + b with W shaped (out, in)."""
    return x @ w.T + b, (x, w)


def linear_backward(dy: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, w = cache
    return dy @ w, dy.T @ x, dy.sum(axis=0)
