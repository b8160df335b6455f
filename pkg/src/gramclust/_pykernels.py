"""Pure numpy / Python implementations of the hot kernels.

This module is the fallback used when the compiled ``_ckernels`` extension is
unavailable (or when ``GRAMCLUST_PURE_PYTHON=1``). Every function here has the
same signature and output contract as its compiled twin; the sign hash is
bit-identical between the two.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def sign_rows(seed, row0, nrows, ncols):
    """Rows ``row0 .. row0+nrows-1`` of the ±1 sign matrix keyed by ``seed``.

    Entry (r, c) is +1 when the top bit of ``mix(mix(seed + G*(r+1)) + G*(c+1))``
    is clear and -1 otherwise, where ``mix`` is the splitmix64 finalizer.
    """
    with np.errstate(over="ignore"):
        rows = np.arange(row0, row0 + nrows, dtype=np.uint64)
        keys = _mix64(np.full(nrows, seed, dtype=np.uint64) + GOLDEN * (rows + np.uint64(1)))
        cols = np.arange(ncols, dtype=np.uint64)
        h = _mix64(keys[:, None] + GOLDEN * (cols[None, :] + np.uint64(1)))
    out = np.ones((nrows, ncols), dtype=np.float64)
    out[(h >> np.uint64(63)).astype(bool)] = -1.0
    return out


def batch_gram(phi):
    """Per-image uncentered second moments, float64 accumulation.

    ``phi`` has shape [N, M, C]; returns [N, C, C] = phi^T phi / M.
    """
    phi = np.asarray(phi, dtype=np.float64)
    m = phi.shape[1]
    g = np.matmul(phi.transpose(0, 2, 1), phi) / m
    return 0.5 * (g + g.transpose(0, 2, 1))


def assign_nearest(x, centroids):
    """Nearest centroid by squared distance; ties go to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    n = x.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    best = np.full(n, np.inf)
    for j in range(centroids.shape[0]):
        diff = x - centroids[j]
        d = np.einsum("ij,ij->i", diff, diff)
        better = d < best
        labels[better] = j
        best[better] = d[better]
    return labels, best


def cluster_sums(x, labels, k):
    """Per-cluster coordinate sums and counts, accumulated in sample order."""
    x = np.asarray(x, dtype=np.float64)
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    return sums, counts


def hungarian(cost):
    """Minimum-cost perfect assignment on a square matrix.

    Shortest augmenting path with row/column potentials, O(n^3). Returns
    ``col_of_row`` as an int64 array.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if cost.ndim != 2 or cost.shape[1] != n:
        raise ValueError("cost matrix must be square")
    a = cost.tolist()
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = a[i0 - 1]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
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


def im2col3x3(x):
    """[B, H, W, C] -> [B, H, W, 9C] patches for a 3x3, stride-1, pad-1 conv."""
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    return np.concatenate([xp[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)], axis=3)


def col2im3x3(dcols, c):
    """Adjoint of :func:`im2col3x3`."""
    b, h, w, _ = dcols.shape
    dxp = np.zeros((b, h + 2, w + 2, c), dtype=dcols.dtype)
    for idx in range(9):
        i, j = divmod(idx, 3)
        dxp[:, i : i + h, j : j + w, :] += dcols[..., idx * c : (idx + 1) * c]
    return dxp[:, 1:-1, 1:-1, :].copy()
