# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Mirrors ``gramclust._pykernels`` function by function."""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int64_t
from libc.math cimport INFINITY

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL


cdef inline uint64_t _mix64(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def sign_rows(uint64_t seed, Py_ssize_t row0, Py_ssize_t nrows, Py_ssize_t ncols):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((nrows, ncols), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, c
    cdef uint64_t key, h
    with nogil:
        for r in range(nrows):
            key = _mix64(seed + GOLDEN * <uint64_t>(row0 + r + 1))
            for c in range(ncols):
                h = _mix64(key + GOLDEN * <uint64_t>(c + 1))
                o[r, c] = -1.0 if (h >> 63) else 1.0
    return out


def batch_gram(phi_in):
    cdef double[:, :, ::1] phi = np.ascontiguousarray(phi_in, dtype=np.float64)
    cdef Py_ssize_t n = phi.shape[0], m = phi.shape[1], c = phi.shape[2]
    out = np.empty((n, c, c), dtype=np.float64)
    cdef double[:, :, ::1] g = out
    cdef Py_ssize_t i, k, a, b
    cdef double s, inv_m = 1.0 / m
    with nogil:
        for i in range(n):
            for a in range(c):
                for b in range(a, c):
                    s = 0.0
                    for k in range(m):
                        s = s + phi[i, k, a] * phi[i, k, b]
                    g[i, a, b] = s * inv_m
                    g[i, b, a] = s * inv_m
    return out


def assign_nearest(x_in, centroids_in):
    cdef double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, ::1] cen = np.ascontiguousarray(centroids_in, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], k = cen.shape[0]
    labels_arr = np.zeros(n, dtype=np.int64)
    best_arr = np.empty(n, dtype=np.float64)
    cdef int64_t[::1] labels = labels_arr
    cdef double[::1] best = best_arr
    cdef Py_ssize_t i, j, t
    cdef double dist, diff
    with nogil:
        for i in range(n):
            best[i] = INFINITY
            for j in range(k):
                dist = 0.0
                for t in range(d):
                    diff = x[i, t] - cen[j, t]
                    dist = dist + diff * diff
                if dist < best[i]:
                    best[i] = dist
                    labels[i] = j
    return labels_arr, best_arr


def cluster_sums(x_in, labels_in, Py_ssize_t k):
    cdef double[:, ::1] x = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef int64_t[::1] labels = np.ascontiguousarray(labels_in, dtype=np.int64)
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    sums_arr = np.zeros((k, d), dtype=np.float64)
    counts_arr = np.zeros(k, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef int64_t[::1] counts = counts_arr
    cdef Py_ssize_t i, t, j
    with nogil:
        for i in range(n):
            j = labels[i]
            counts[j] += 1
            for t in range(d):
                sums[j, t] += x[i, t]
    return sums_arr, counts_arr


def hungarian(cost_in):
    cost_np = np.asarray(cost_in, dtype=np.float64)
    if cost_np.ndim != 2 or cost_np.shape[0] != cost_np.shape[1]:
        raise ValueError("cost matrix must be square")
    cdef double[:, ::1] a = np.ascontiguousarray(cost_np)
    cdef Py_ssize_t n = a.shape[0]
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(n + 1)
    cdef double[::1] minv = np.empty(n + 1)
    cdef int64_t[::1] p = np.zeros(n + 1, dtype=np.int64)
    cdef int64_t[::1] way = np.zeros(n + 1, dtype=np.int64)
    cdef unsigned char[::1] used = np.zeros(n + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INFINITY
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while True:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
                if j0 == 0:
                    break
    col_of_row = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row


ctypedef fused real:
    float
    double


cdef void _im2col_impl(real[:, :, :, ::1] x, real[:, :, :, ::1] cols) noexcept nogil:
    cdef Py_ssize_t b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t n, yy, xx, i, j, ch, sy, sx, base
    for n in range(b):
        for yy in range(h):
            for xx in range(w):
                for i in range(3):
                    sy = yy + i - 1
                    for j in range(3):
                        sx = xx + j - 1
                        base = (i * 3 + j) * c
                        if sy < 0 or sy >= h or sx < 0 or sx >= w:
                            for ch in range(c):
                                cols[n, yy, xx, base + ch] = 0
                        else:
                            for ch in range(c):
                                cols[n, yy, xx, base + ch] = x[n, sy, sx, ch]


cdef void _col2im_impl(real[:, :, :, ::1] dcols, real[:, :, :, ::1] dx) noexcept nogil:
    cdef Py_ssize_t b = dx.shape[0], h = dx.shape[1], w = dx.shape[2], c = dx.shape[3]
    cdef Py_ssize_t n, yy, xx, i, j, ch, sy, sx, base
    # same accumulation order as the numpy fallback: offsets outer, pixels inner
    for i in range(3):
        for j in range(3):
            base = (i * 3 + j) * c
            for n in range(b):
                for yy in range(h):
                    sy = yy + i - 1
                    if sy < 0 or sy >= h:
                        continue
                    for xx in range(w):
                        sx = xx + j - 1
                        if sx < 0 or sx >= w:
                            continue
                        for ch in range(c):
                            dx[n, sy, sx, ch] += dcols[n, yy, xx, base + ch]


def im2col3x3(x):
    """[B, H, W, C] -> [B, H, W, 9C] patches for a 3x3, stride-1, pad-1 conv."""
    x = np.ascontiguousarray(x)
    cols = np.empty(x.shape[:3] + (9 * x.shape[3],), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col_impl[float](x, cols)
    elif x.dtype == np.float64:
        _im2col_impl[double](x, cols)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im3x3(dcols, Py_ssize_t c):
    """Adjoint of :func:`im2col3x3`."""
    dcols = np.ascontiguousarray(dcols)
    dx = np.zeros(dcols.shape[:3] + (c,), dtype=dcols.dtype)
    if dcols.dtype == np.float32:
        _col2im_impl[float](dcols, dx)
    elif dcols.dtype == np.float64:
        _col2im_impl[double](dcols, dx)
    else:
        raise TypeError(f"unsupported dtype {dcols.dtype}")
    return dx
