"""Dense NCHW arrays and the handful of whole-array operations built on them.

Tensors are plain ``numpy.ndarray`` objects of rank 4 laid out row-major as
(batch, channel, height, width). Training uses float32, gradient checks use
float64.
"""

import numpy as np

from .errors import ShapeError

DTYPES = (np.float32, np.float64)


def as_tensor(data, dtype=np.float32):
    """Return ``data`` as a contiguous 4-D array of the requested dtype."""
    t = np.ascontiguousarray(data, dtype=dtype)
    if t.ndim != 4:
        raise ShapeError(f"expected a 4-D (n, c, h, w) array, got shape {t.shape}")
    if min(t.shape) < 1:
        raise ShapeError(f"all dimensions must be >= 1, got shape {t.shape}")
    return t


def offset(shape, n, c, y, x):
    """Flat row-major offset of element (n, c, y, x) in a tensor of ``shape``."""
    _, C, H, W = shape
    return ((n * C + c) * H + y) * W + x


def coords(shape, off):
    """Inverse of :func:`offset`."""
    _, C, H, W = shape
    off, x = divmod(off, W)
    off, y = divmod(off, H)
    n, c = divmod(off, C)
    return n, c, y, x


def pad2d(t, pad):
    """Zero-pad the two spatial axes by ``pad`` pixels on every side."""
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return t.copy()
    n, c, h, w = t.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=t.dtype)
    out[:, :, pad:pad + h, pad:pad + w] = t
    return out


def crop2d(t, top, left, h, w):
    """Copy out the window ``[top:top+h, left:left+w]`` of every plane."""
    H, W = t.shape[2:]
    if top < 0 or left < 0 or h < 1 or w < 1 or top + h > H or left + w > W:
        raise IndexError(
            f"crop window (top={top}, left={left}, h={h}, w={w}) "
            f"out of bounds for spatial size {H}x{W}")
    return t[:, :, top:top + h, left:left + w].copy()


def mean_abs_diff(a, b):
    """Mean absolute elementwise difference of two equally shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b), dtype=np.float64))
