"""Exact dynamic time warping with deterministic tie-breaking."""
from __future__ import annotations

import numpy as np

# predecessor moves in preference order: diagonal, vertical (i-1), horizontal (j-1)
_MOVES = ((1, 1), (1, 0), (0, 1))


def _as_frames(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("DTW needs a non-empty sequence of vectors")
    return a


def pairwise_cost(a, b, cost: str = "euclidean") -> np.ndarray:
    if cost != "euclidean":
        raise ValueError(f"unsupported cost {cost!r}")
    a, b = _as_frames(a), _as_frames(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def dtw(a, b, cost: str = "euclidean") -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost monotone, continuous alignment of ``a`` onto ``b``.

    Returns the path as (i, j) pairs from (0, 0) to (Ta-1, Tb-1) and its summed cost.
    """
    c = pairwise_cost(a, b, cost)
    ta, tb = c.shape
    acc = np.full((ta + 1, tb + 1), np.inf)
    acc[0, 0] = 0.0
    back = np.zeros((ta, tb), dtype=np.int8)
    for i in range(1, ta + 1):
        row_prev, row = acc[i - 1], acc[i]
        ci = c[i - 1]
        for j in range(1, tb + 1):
            best, arg = row_prev[j - 1], 0
            if row_prev[j] < best:
                best, arg = row_prev[j], 1
            if row[j - 1] < best:
                best, arg = row[j - 1], 2
            row[j] = ci[j - 1] + best
            back[i - 1, j - 1] = arg
    path = [(ta - 1, tb - 1)]
    i, j = ta - 1, tb - 1
    while (i, j) != (0, 0):
        di, dj = _MOVES[back[i, j]]
        i, j = i - di, j - dj
        path.append((i, j))
    path.reverse()
    return path, float(acc[ta, tb])


def validate_path(path, ta: int, tb: int) -> None:
    if not path or tuple(path[0]) != (0, 0) or tuple(path[-1]) != (ta - 1, tb - 1):
        raise ValueError(f"path must run from (0, 0) to ({ta - 1}, {tb - 1})")
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        if (i1 - i0, j1 - j0) not in _MOVES:
            raise ValueError(f"non-monotone or discontinuous step {(i0, j0)} -> {(i1, j1)}")
