"""Pure-NumPy convolution kernels (fallback for the compiled extension).

Same-padding 2-D cross-correlation for odd square kernels. The forward
pass and the input gradient accumulate contributions in (ci, ky, kx)
term order, matching the compiled kernels bit for bit; the weight/bias
gradients reduce with NumPy's pairwise summation and agree with the
compiled kernels only to rounding.
"""

import numpy as np

BACKEND_NAME = "numpy"


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross-correlate x (N,Ci,H,W) with w (Co,Ci,k,k), add bias b (Co,)."""
    n, ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    if ci != ci_w or kh != kw or kh % 2 != 1:
        raise ValueError(f"bad kernel shape {w.shape} for input {x.shape}")
    p = kh // 2
    xp = _pad(x, p)
    y = np.empty((n, co, h, wd))
    y[:] = b[None, :, None, None]
    for c in range(ci):
        for ky in range(kh):
            for kx in range(kw):
                patch = xp[:, c, ky:ky + h, kx:kx + wd]
                y += w[None, :, c, ky, kx, None, None] * patch[:, None]
    return y


def conv2d_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray,
                    need_gx: bool = True):
    """Gradients of conv2d_forward w.r.t. input, weights and bias."""
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    p = kh // 2
    xp = _pad(x, p)

    gb = gy.sum(axis=(0, 2, 3))
    gw = np.empty_like(w)
    for c in range(ci):
        for ky in range(kh):
            for kx in range(kw):
                patch = xp[:, c, ky:ky + h, kx:kx + wd]
                gw[:, c, ky, kx] = np.einsum("nyx,noyx->o", patch, gy)

    gx = None
    if need_gx:
        gxp = np.zeros((n, ci, h + 2 * p, wd + 2 * p))
        for o in range(co):
            g = gy[:, o]
            for ky in range(kh):
                for kx in range(kw):
                    gxp[:, :, ky:ky + h, kx:kx + wd] += (
                        w[None, o, :, ky, kx, None, None] * g[:, None]
                    )
        gx = gxp[:, :, p:p + h, p:p + wd] if p else gxp
    return gx, gw, gb
