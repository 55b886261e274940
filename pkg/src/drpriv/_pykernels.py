"""Pure-numpy conv2d kernels; same contract as the compiled ``_ckernels``."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(size, k, stride):
    if size < k:
        raise ValueError(f"padded input {size} smaller than kernel {k}")
    return (size - k) // stride + 1


def _windows(x, kh, kw, stride):
    # (N, C, Ho, Wo, kh, kw) strided view, no copy
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride):
    """Valid cross-correlation of padded ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    O, C, kh, kw = w.shape
    if x.shape[1] != C:
        raise ValueError("channel mismatch between input and weight")
    _out_size(x.shape[2], kh, stride)
    _out_size(x.shape[3], kw, stride)
    win = _windows(x, kh, kw, stride)
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward_input(gy, w, stride, hp, wp):
    """Adjoint of :func:`conv2d_forward` with respect to its (padded) input."""
    N, O, ho, wo = gy.shape
    _, C, kh, kw = w.shape
    if w.shape[0] != O:
        raise ValueError("channel mismatch between gradient and weight")
    if _out_size(hp, kh, stride) != ho or _out_size(wp, kw, stride) != wo:
        raise ValueError("padded input size incompatible with gradient size")
    gx = np.zeros((N, C, hp, wp))
    # (N, Ho, Wo, C, kh, kw)
    gcols = np.tensordot(gy.transpose(0, 2, 3, 1), w, axes=([3], [0]))
    for a in range(kh):
        for b in range(kw):
            gx[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += (
                gcols[..., a, b].transpose(0, 3, 1, 2)
            )
    return gx


def conv2d_backward_weight(x, gy, stride, kh, kw):
    """Gradient of :func:`conv2d_forward` with respect to the weight."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    ho, wo = gy.shape[2], gy.shape[3]
    if _out_size(x.shape[2], kh, stride) != ho or _out_size(x.shape[3], kw, stride) != wo:
        raise ValueError("input size incompatible with gradient size")
    win = _windows(x, kh, kw, stride)
    return np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
