"""Dense float64 kernels shared by the network engine and the saliency code.

Tensors are plain ``numpy.ndarray`` values of dtype float64; activations use the
channels x height x width convention. Every function here returns a new array and
never mutates its inputs.
"""

import numpy as np

from .errors import InvalidArgumentError, ShapeError

DTYPE = np.float64


def as_tensor(values: object, *, min_rank: int = 1, max_rank: int = 4) -> np.ndarray:
    array = np.asarray(values, dtype=DTYPE)
    if not min_rank <= array.ndim <= max_rank:
        raise ShapeError(f"expected rank {min_rank}..{max_rank}, got shape {array.shape}")
    if array.size == 0:
        raise ShapeError(f"empty tensor of shape {array.shape}")
    if not np.all(np.isfinite(array)):
        raise InvalidArgumentError("tensor contains NaN or Inf")
    return array


def as_matrix(values: object) -> np.ndarray:
    return as_tensor(values, min_rank=2, max_rank=2)


def upsample_nearest(m: np.ndarray, factor: int) -> np.ndarray:
    m = as_matrix(m)
    if int(factor) != factor or factor < 1:
        raise InvalidArgumentError(f"upsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    return np.repeat(np.repeat(m, factor, axis=0), factor, axis=1)


def _corner_aligned_axis(size_in: int, size_out: int):
    if size_out == 1 or size_in == 1:
        coords = np.zeros(size_out, dtype=DTYPE)
    else:
        coords = np.arange(size_out, dtype=DTYPE) * (size_in - 1) / (size_out - 1)
    lower = np.floor(coords).astype(np.int64)
    lower = np.minimum(lower, size_in - 1)
    upper = np.minimum(lower + 1, size_in - 1)
    frac = coords - lower
    return lower, upper, frac


def upsample_bilinear(m: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    m = as_matrix(m)
    h, w = m.shape
    if out_h < h or out_w < w:
        raise InvalidArgumentError(f"cannot shrink {h}x{w} to {out_h}x{out_w}")
    y0, y1, fy = _corner_aligned_axis(h, out_h)
    x0, x1, fx = _corner_aligned_axis(w, out_w)
    rows = m[y0, :] * (1.0 - fy)[:, None] + m[y1, :] * fy[:, None]
    return rows[:, x0] * (1.0 - fx)[None, :] + rows[:, x1] * fx[None, :]


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard of {a.shape} and {b.shape}")
    return a * b


def normalize_max(m: np.ndarray) -> np.ndarray:
    m = as_matrix(m)
    if np.any(m < 0):
        raise InvalidArgumentError("normalize_max needs non-negative entries")
    peak = m.max()
    if peak == 0:
        return m.copy()
    return m / peak
