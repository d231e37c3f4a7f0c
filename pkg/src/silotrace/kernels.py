"""Hot numeric loops, each with a numba twin and a numpy twin.

Both twins must return bit-identical results; the test suite checks this and
``benchmarks/bench_kernels.py`` times them against each other.  All modular
arithmetic is on ``uint64`` and wraps modulo 2**64.
"""

import numpy as np

from ._accel import njit, use_numba

# -- secure-sum ----------------------------------------------------------------


@njit
def _column_sum_u64_nb(mat):
    n, ell = mat.shape
    out = np.zeros(ell, dtype=np.uint64)
    for i in range(n):
        for j in range(ell):
            out[j] += mat[i, j]
    return out


def _column_sum_u64_np(mat):
    if mat.shape[0] == 0:
        return np.zeros(mat.shape[1], dtype=np.uint64)
    return mat.sum(axis=0, dtype=np.uint64)


@njit
def _sub_u64_nb(a, b):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i] = a[i] - b[i]
    return out


def _sub_u64_np(a, b):
    return np.subtract(a, b, dtype=np.uint64)


@njit
def _add_u64_nb(a, b):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i] = a[i] + b[i]
    return out


def _add_u64_np(a, b):
    return np.add(a, b, dtype=np.uint64)


# -- randomized response ---------------------------------------------------------


@njit
def _rr_perturb_nb(bits, uniforms, p_keep):
    n, ell = bits.shape
    out = np.empty((n, ell), dtype=np.uint8)
    for i in range(n):
        for j in range(ell):
            b = bits[i, j]
            if uniforms[i, j] < p_keep:
                out[i, j] = b
            else:
                out[i, j] = 1 - b
    return out


def _rr_perturb_np(bits, uniforms, p_keep):
    keep = uniforms < p_keep
    return np.where(keep, bits, 1 - bits).astype(np.uint8)


@njit
def _column_count_nb(bits):
    n, ell = bits.shape
    out = np.zeros(ell, dtype=np.int64)
    for i in range(n):
        for j in range(ell):
            out[j] += bits[i, j]
    return out


def _column_count_np(bits):
    return bits.sum(axis=0, dtype=np.int64)


# -- unitization -----------------------------------------------------------------


@njit
def _segment_bounds_nb(starts, ends, seg):
    n = starts.shape[0]
    first = np.empty(n, dtype=np.int64)
    last = np.empty(n, dtype=np.int64)
    for i in range(n):
        s = starts[i]
        e = ends[i]
        first[i] = s // seg
        if e > s:
            last[i] = (e - 1) // seg
        else:
            last[i] = s // seg
    return first, last


def _segment_bounds_np(starts, ends, seg):
    first = np.floor_divide(starts, seg)
    last = np.where(ends > starts, np.floor_divide(ends - 1, seg), first)
    return first.astype(np.int64), last.astype(np.int64)


# -- grid cells ------------------------------------------------------------------

# Absorbs binary representation error for decimal inputs sitting on a boundary.
_GRID_NUDGE = 1e-9


@njit
def _grid_indices_nb(coords, origin, cell):
    out = np.empty(coords.shape[0], dtype=np.int64)
    for i in range(coords.shape[0]):
        out[i] = np.int64(np.floor((coords[i] - origin) / cell + _GRID_NUDGE))
    return out


def _grid_indices_np(coords, origin, cell):
    return np.floor((coords - origin) / cell + _GRID_NUDGE).astype(np.int64)


# -- dispatch ----------------------------------------------------------------------


def column_sum_u64(mat: np.ndarray) -> np.ndarray:
    """Per-column sum of a ``(n, ell)`` uint64 matrix, modulo 2**64."""
    mat = np.ascontiguousarray(mat, dtype=np.uint64)
    if use_numba():
        return _column_sum_u64_nb(mat)
    return _column_sum_u64_np(mat)


def sub_u64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint64)
    if use_numba():
        return _sub_u64_nb(a, b)
    return _sub_u64_np(a, b)


def add_u64(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.uint64)
    b = np.ascontiguousarray(b, dtype=np.uint64)
    if use_numba():
        return _add_u64_nb(a, b)
    return _add_u64_np(a, b)


def rr_perturb(bits: np.ndarray, uniforms: np.ndarray, p_keep: float) -> np.ndarray:
    """Keep each bit where ``uniforms < p_keep``, flip it otherwise."""
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    uniforms = np.ascontiguousarray(uniforms, dtype=np.float64)
    if use_numba():
        return _rr_perturb_nb(bits, uniforms, float(p_keep))
    return _rr_perturb_np(bits, uniforms, float(p_keep))


def column_count(bits: np.ndarray) -> np.ndarray:
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    if use_numba():
        return _column_count_nb(bits)
    return _column_count_np(bits)


def segment_bounds(starts, ends, seg: int):
    """First and last global segment index touched by each ``[start, end)``.

    A zero-length interval maps to the single segment containing it.
    """
    starts = np.ascontiguousarray(starts, dtype=np.int64)
    ends = np.ascontiguousarray(ends, dtype=np.int64)
    if use_numba():
        return _segment_bounds_nb(starts, ends, np.int64(seg))
    return _segment_bounds_np(starts, ends, np.int64(seg))


def grid_indices(coords, origin: float, cell: float) -> np.ndarray:
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if use_numba():
        return _grid_indices_nb(coords, float(origin), float(cell))
    return _grid_indices_np(coords, float(origin), float(cell))
