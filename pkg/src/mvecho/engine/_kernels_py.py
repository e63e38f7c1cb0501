"""Pure-numpy convolution kernels (NHWC, input already padded).

Same call signatures as the compiled ``_ckernels`` module; used when the
extension is unavailable or ``MVECHO_PURE_PYTHON=1``.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, kh, kw, stride, ho, wo):
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (n, ho, wo, c, kh, kw) -> (n, ho, wo, kh, kw, c)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, kh * kw * c)


def col2im(cols, xp_shape, kh, kw, stride, ho, wo):
    n, _, _, c = xp_shape
    dxp = np.zeros(xp_shape, dtype=cols.dtype)
    cols6 = cols.reshape(n, ho, wo, kh, kw, c)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for a in range(kh):
        for b in range(kw):
            dxp[:, a : a + hs : stride, b : b + ws : stride, :] += cols6[:, :, :, a, b, :]
    return dxp


def dw_forward(xp, w, stride, ho, wo):
    kh, kw, _ = w.shape
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    out = np.zeros((xp.shape[0], ho, wo, xp.shape[3]), dtype=xp.dtype)
    for a in range(kh):
        for b in range(kw):
            out += xp[:, a : a + hs : stride, b : b + ws : stride, :] * w[a, b]
    return out


def dw_backward(xp, w, g, stride):
    """Return (d input_padded, d kernel) for the depthwise product."""
    kh, kw, _ = w.shape
    ho, wo = g.shape[1], g.shape[2]
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    dxp = np.zeros_like(xp)
    dw = np.empty_like(w)
    for a in range(kh):
        for b in range(kw):
            win = xp[:, a : a + hs : stride, b : b + ws : stride, :]
            dw[a, b] = np.einsum("nhwc,nhwc->c", win, g)
            dxp[:, a : a + hs : stride, b : b + ws : stride, :] += g * w[a, b]
    return dxp, dw
