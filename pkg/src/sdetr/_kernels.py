"""Hot-loop scatter-add kernels (numba) used by gradient accumulation.

numpy's ``np.add.at`` is an order of magnitude too slow for the bilinear
sampling backward pass, which dominates training time.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def _scatter_rows(out, rows, vals):
    n, c = vals.shape
    for i in range(n):
        r = rows[i]
        for k in range(c):
            out[r, k] += vals[i, k]


@numba.njit(cache=True)
def _scatter_scalar(out, idx, vals):
    for i in range(idx.shape[0]):
        out[idx[i]] += vals[i]


def scatter_add_rows(out2d: np.ndarray, rows: np.ndarray, vals2d: np.ndarray) -> None:
    """out2d[rows[i], :] += vals2d[i, :] with duplicate rows accumulating."""
    _scatter_rows(out2d, rows.astype(np.int64, copy=False).ravel(),
                  np.ascontiguousarray(vals2d.reshape(-1, vals2d.shape[-1])))


def scatter_add_flat(out1d: np.ndarray, idx: np.ndarray, vals: np.ndarray) -> None:
    """out1d[idx[i]] += vals[i] with duplicate indices accumulating."""
    _scatter_scalar(out1d, idx.astype(np.int64, copy=False).ravel(),
                    np.ascontiguousarray(vals.ravel()))
