"""Independent reference implementations the tests compare against.

Deliberately written in the most direct style possible (scalar loops,
textbook formulas) and kept free of any package internals beyond input
conventions, so agreement is meaningful.
"""

import numpy as np


def cubic(x: float, a: float = -0.5) -> float:
    ax = abs(x)
    if ax <= 1:
        return (a + 2) * ax**3 - (a + 3) * ax**2 + 1
    if ax < 2:
        return a * ax**3 - 5 * a * ax**2 + 8 * a * ax - 4 * a
    return 0.0


def reflect(j: int, n: int) -> int:
    if n == 1:
        return 0
    p = 2 * n - 2
    j = abs(j) % p
    return p - j if j >= n else j


def ref_downsample(img: np.ndarray, s: int, a: float = -0.5) -> np.ndarray:
    """Direct 2-D anti-aliased bicubic: per-pixel loops, joint renorm."""
    h_in, w_in, c = img.shape
    h_out, w_out = h_in // s, w_in // s
    out = np.zeros((h_out, w_out, c))
    for i in range(h_out):
        cy = (i + 0.5) * s - 0.5
        for j in range(w_out):
            cx = (j + 0.5) * s - 0.5
            acc = np.zeros(c)
            wsum = 0.0
            for dy in range(int(np.floor(cy)) - 2 * s + 1, int(np.floor(cy)) + 2 * s + 1):
                wy = cubic((dy - cy) / s, a) / s
                if wy == 0:
                    continue
                for dx in range(int(np.floor(cx)) - 2 * s + 1, int(np.floor(cx)) + 2 * s + 1):
                    wx = cubic((dx - cx) / s, a) / s
                    wgt = wy * wx
                    acc += wgt * img[reflect(dy, h_in), reflect(dx, w_in)]
                    wsum += wgt
            out[i, j] = acc / wsum
    return np.clip(out, 0.0, 1.0)


def ref_psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return 10.0 * np.log10(1.0 / mse)


def ref_pearson(x, y) -> float:
    """Textbook Pearson: covariance over product of standard deviations."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    n = x.size
    sx, sy = x.sum(), y.sum()
    sxx, syy, sxy = (x * x).sum(), (y * y).sum(), (x * y).sum()
    num = n * sxy - sx * sy
    den = np.sqrt(n * sxx - sx * sx) * np.sqrt(n * syy - sy * sy)
    return num / den


def ref_rankings(scores_by_id: dict, k_store: int) -> list:
    """Per-channel (score desc, id asc) top-k lists via full sort."""
    ids = sorted(scores_by_id)
    n_channels = len(next(iter(scores_by_id.values())))
    rankings = []
    for ch in range(n_channels):
        order = sorted(ids, key=lambda i: (-scores_by_id[i][ch], i))
        rankings.append([(i, float(scores_by_id[i][ch])) for i in order[:k_store]])
    return rankings


def ref_top_m(scores, m: int) -> list:
    order = sorted(range(len(scores)), key=lambda c: (-scores[c], c))
    return order[:m]


def ref_select(rankings: list, filter_ids, k: int) -> list:
    """Dedup-with-backfill selection: walk each filter's list past taken ids."""
    chosen, seen = [], set()
    for fid in filter_ids:
        taken = 0
        for img_id, _score in rankings[fid]:
            if taken == k:
                break
            if img_id not in seen:
                seen.add(img_id)
                chosen.append(img_id)
                taken += 1
    return chosen
