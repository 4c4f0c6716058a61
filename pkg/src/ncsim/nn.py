"""Minimal float64 conv-net primitives with hand-written backward passes.

Activations are channels-last, (batch, height, width, channels): the im2col
gather then copies contiguous 3C-element runs and the matmul output needs no
transpose, which is worth several x in wall time over a channels-first
layout. Convolutions are 3x3 with zero padding 1, stride 1 or 2. Each
forward returns whatever the matching ``*_backward`` needs as an opaque
cache.

Weight arrays keep the conventional (out_channels, in_channels, 3, 3) shape;
``weight_matrix`` reorders them once per call to the (9 * Cin, Cout) layout
the matmul wants.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def weight_matrix(w: np.ndarray) -> np.ndarray:
    """(Cout, Cin, 3, 3) -> (9 * Cin, Cout) in (k, l, c) row order."""
    cout, cin = w.shape[0], w.shape[1]
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(9 * cin, cout))


def weight_matrix_inverse(wmat: np.ndarray, cin: int) -> np.ndarray:
    """Inverse of :func:`weight_matrix` for gradients."""
    cout = wmat.shape[1]
    return wmat.reshape(3, 3, cin, cout).transpose(3, 2, 0, 1)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1):
    """x: (B, H, W, Cin), w: (Cout, Cin, 3, 3), b: (Cout,) -> (B, Ho, Wo, Cout)."""
    batch, h, wd, cin = x.shape
    cout = w.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, Ho, Wo, Cin, 3, 3)
    if stride == 2:
        win = win[:, ::2, ::2]
    ho, wo = win.shape[1], win.shape[2]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    cols = cols.reshape(batch * ho * wo, 9 * cin)
    out = cols @ weight_matrix(w)
    out += b
    return out.reshape(batch, ho, wo, cout), (cols, x.shape, stride)


def conv3x3_backward(dout: np.ndarray, w: np.ndarray, cache):
    """Returns (dx, dw, db) for :func:`conv3x3_forward`."""
    cols, x_shape, stride = cache
    batch, h, wd, cin = x_shape
    cout = w.shape[0]
    ho, wo = dout.shape[1], dout.shape[2]
    dmat = dout.reshape(batch * ho * wo, cout)
    db = dmat.sum(axis=0)
    dw = weight_matrix_inverse(cols.T @ dmat, cin)
    dcols = (dmat @ weight_matrix(w).T).reshape(batch, ho, wo, 3, 3, cin)
    dxp = np.zeros((batch, h + 2, wd + 2, cin))
    for k in range(3):
        for l in range(3):
            dxp[:, k:k + stride * ho:stride, l:l + stride * wo:stride, :] += \
                dcols[:, :, :, k, l, :]
    return dxp[:, 1:h + 1, 1:wd + 1, :], dw, db


def upsample2_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor x2 upsampling: (B, H, W, C) -> (B, 2H, 2W, C)."""
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample2_backward(dout: np.ndarray) -> np.ndarray:
    batch, h2, w2, c = dout.shape
    return dout.reshape(batch, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


def silu_forward(x: np.ndarray):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, sig


def silu_backward(dout: np.ndarray, x: np.ndarray, sig: np.ndarray) -> np.ndarray:
    return dout * sig * (1.0 + x * (1.0 - sig))


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """x: (B, Din), w: (Dout, Din), b: (Dout,) -> (B, Dout)."""
    return x @ w.T + b, x


def linear_backward(dout: np.ndarray, w: np.ndarray, x: np.ndarray):
    dw = dout.T @ x
    db = dout.sum(axis=0)
    dx = dout @ w
    return dx, dw, db


def fourier_time_features(tau: np.ndarray, freq: np.ndarray):
    """Gaussian Fourier features of normalized time: [cos(2 pi f tau), sin(...)]."""
    ang = 2.0 * np.pi * tau[:, None] * freq[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    return np.concatenate([cos, sin], axis=1), (tau, cos, sin)


def fourier_time_backward(dfeat: np.ndarray, freq: np.ndarray, cache):
    """Gradient with respect to the (frozen but differentiable) frequencies."""
    tau, cos, sin = cache
    nfreq = freq.size
    dang = -dfeat[:, :nfreq] * sin + dfeat[:, nfreq:] * cos
    return (dang * (2.0 * np.pi) * tau[:, None]).sum(axis=0)
