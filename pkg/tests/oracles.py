"""Independent reference implementations used only as test oracles.

Each oracle is written directly from the classical formulas, structured
differently from the production kernels, so agreement is meaningful.
"""

import numpy as np

from gun.metrics import IGNORE_LABEL


def nearest_upsample_oracle(u: np.ndarray, factor: int) -> np.ndarray:
    """Half-pixel-centered nearest upsampling by an integer factor is exactly
    pixel replication."""
    return np.repeat(np.repeat(u, factor, axis=-2), factor, axis=-1)


def _hat_matrix(n_out: int, n_in: int, factor: float) -> np.ndarray:
    """Dense classical interpolation matrix with border-replicating clamp."""
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    idx = np.arange(n_in)
    return np.maximum(0.0, 1.0 - np.abs(src[:, None] - idx[None, :]))


def bilinear_upsample_oracle(u: np.ndarray, factor: int) -> np.ndarray:
    """Classical separable bilinear upsampling via dense hat matrices."""
    hy = _hat_matrix(u.shape[-2] * factor, u.shape[-2], factor)
    hx = _hat_matrix(u.shape[-1] * factor, u.shape[-1], factor)
    return np.einsum("oi,ncij,pj->ncop", hy, u, hx)


def guided_sample_reference(u: np.ndarray, grid, offsets, mode: str) -> np.ndarray:
    """Literal double-loop sum over all source pixels.

    Nearest uses the Kronecker-delta selector on the rounded shifted
    coordinate; bilinear accumulates hat-weighted terms. The loop range is
    extended by a border-replicated ring wide enough for the offsets in
    play, which realizes the border-clamp policy inside the literal sum;
    in-range sample points reduce to the pure forms.
    """
    n, c, hi, wi = u.shape
    out = np.zeros((n, c, grid.h_out, grid.w_out))
    if offsets is None:
        offsets = np.zeros((n, 2, grid.h_out, grid.w_out))
    ring = int(np.ceil(np.abs(offsets).max())) + 2
    for b in range(n):
        for i in range(grid.h_out):
            for j in range(grid.w_out):
                cx = grid.xs[j] + offsets[b, 0, i, j]
                cy = grid.ys[i] + offsets[b, 1, i, j]
                acc = np.zeros(c)
                if mode == "nearest":
                    rx = int(np.floor(cx + 0.5))
                    ry = int(np.floor(cy + 0.5))
                    for nn in range(-ring, hi + ring):
                        for mm in range(-ring, wi + ring):
                            if rx == mm and ry == nn:
                                acc += u[b, :, min(max(nn, 0), hi - 1),
                                         min(max(mm, 0), wi - 1)]
                else:
                    for nn in range(-ring, hi + ring):
                        wy = max(0.0, 1.0 - abs(cy - nn))
                        for mm in range(-ring, wi + ring):
                            wx = max(0.0, 1.0 - abs(cx - mm))
                            w = wy * wx
                            if w != 0.0:
                                acc = acc + u[b, :, min(max(nn, 0), hi - 1),
                                              min(max(mm, 0), wi - 1)] * w
                out[b, :, i, j] = acc
    return out


def brute_force_boundary_distance(gt: np.ndarray) -> np.ndarray:
    """O((HW)^2) distance to the nearest non-ignore pixel of another class."""
    h, w = gt.shape
    out = np.full((h, w), np.inf)
    ys, xs = np.mgrid[0:h, 0:w]
    for i in range(h):
        for j in range(w):
            if gt[i, j] == IGNORE_LABEL:
                continue
            differing = (gt != gt[i, j]) & (gt != IGNORE_LABEL)
            if differing.any():
                d2 = (ys[differing] - i) ** 2 + (xs[differing] - j) ** 2
                out[i, j] = np.sqrt(d2.min())
    return out
