"""Pure numpy implementations of the hot kernels.

Fallback backend used when the compiled extension is unavailable (or when
``CBODD_BACKEND=reference`` forces it).  All functions take and return
C-contiguous float64 arrays; convolution inputs arrive already padded.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BACKEND_NAME = "reference"


def conv2d_forward(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Cross-correlate a padded batch ``xp`` (B,Ci,Hp,Wp) with ``w`` (Co,Ci,kh,kw)."""
    batch, _, hp, wp = xp.shape
    c_out, _, kh, kw = w.shape
    h_out = (hp - kh) // stride + 1
    w_out = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * h_out * w_out, -1
    )
    out = cols @ w.reshape(c_out, -1).T
    return np.ascontiguousarray(
        out.reshape(batch, h_out, w_out, c_out).transpose(0, 3, 1, 2)
    )


def conv2d_grad_input(
    gy: np.ndarray, w: np.ndarray, stride: int, hp: int, wp: int
) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. the padded input."""
    batch, c_out, h_out, w_out = gy.shape
    _, c_in, kh, kw = w.shape
    gym = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    gcols = (gym @ w.reshape(c_out, -1)).reshape(batch, h_out, w_out, c_in, kh, kw)
    gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # (B,Ci,kh,kw,Ho,Wo)
    gxp = np.zeros((batch, c_in, hp, wp))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * h_out : stride, j : j + stride * w_out : stride] += gcols[
                :, :, i, j
            ]
    return gxp


def conv2d_grad_weight(
    gy: np.ndarray, xp: np.ndarray, kh: int, kw: int, stride: int
) -> np.ndarray:
    """Gradient of conv2d_forward w.r.t. the kernel."""
    batch, c_out, h_out, w_out = gy.shape
    c_in = xp.shape[1]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        batch * h_out * w_out, -1
    )
    gym = np.ascontiguousarray(gy.transpose(0, 2, 3, 1)).reshape(-1, c_out)
    return (gym.T @ cols).reshape(c_out, c_in, kh, kw)
