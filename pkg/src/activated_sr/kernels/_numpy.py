"""NumPy fallback implementations of the hot kernels."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def apply_weights_axis0(arr: np.ndarray, idx: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Resample ``arr`` along axis 0 with precomputed taps.

    ``out[o, j] = sum_t w[o, t] * arr[idx[o, t], j]``

    Args:
        arr: (H, W) float64 input.
        idx: (H_out, T) int64 source-row indices, already boundary-mapped.
        w: (H_out, T) float64 tap weights.

    Returns:
        (H_out, W) float64 output.
    """
    gathered = arr[idx]  # (H_out, T, W)
    return np.einsum("ot,otw->ow", w, gathered)


def gauss_valid(arr: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-D kernel along both axes.

    Args:
        arr: (H, W) float64 input.
        k: (T,) float64 kernel, T odd.

    Returns:
        (H-T+1, W-T+1) float64 output.
    """
    rows = sliding_window_view(arr, len(k), axis=0) @ k
    return sliding_window_view(rows, len(k), axis=1) @ k
