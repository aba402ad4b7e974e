"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The numba path is selected at import time unless SEGPRIOR_NO_NUMBA=1 (or
numba is missing), in which case the vectorized numpy fallbacks are used.
Both variants stay importable (``nb_*`` / ``np_*``) so the benchmark in
``benchmarks/kernel_bench.py`` can compare them directly.

Array layout is channel-last everywhere: images (H, W, C), activation
batches (B, H, W, C).
"""

import os

import numpy as np

USE_NUMBA = os.environ.get("SEGPRIOR_NO_NUMBA", "0").lower() not in ("1", "true", "yes")
if USE_NUMBA:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        USE_NUMBA = False

# Geometry codes shared with synthdata.
ELLIPSE, RECTANGLE, TRIANGLE, CROSS = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# im2col / col2im for 3x3 convolutions (input already zero-padded by 1)
# ---------------------------------------------------------------------------

def np_im2col_k3(xp, stride, ho, wo, cols):
    """Gather 3x3 patches of xp (B, H+2, W+2, C) into cols (B, ho, wo, 3, 3, C).

    ``cols`` is caller-provided so training loops can reuse one buffer per
    layer instead of faulting in tens of fresh megabytes every batch.
    """
    for ki in range(3):
        for kj in range(3):
            cols[:, :, :, ki, kj, :] = xp[:, ki:ki + stride * ho:stride,
                                          kj:kj + stride * wo:stride, :]
    return cols


def _im2col_k3_loops(xp, stride, ho, wo, cols):
    b = xp.shape[0]
    for n in range(b):
        for i in range(ho):
            si = i * stride
            for j in range(wo):
                sj = j * stride
                for ki in range(3):
                    # contiguous (3, c) block copy on both sides
                    cols[n, i, j, ki, :, :] = xp[n, si + ki, sj:sj + 3, :]
    return cols


def np_col2im_k3(dcols, stride, dxp):
    """Scatter-add patch gradients (B, ho, wo, 3, 3, C) into dxp (B, hp, wp, C)."""
    ho, wo = dcols.shape[1], dcols.shape[2]
    dxp[:] = 0
    for ki in range(3):
        for kj in range(3):
            dxp[:, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride, :] += \
                dcols[:, :, :, ki, kj, :]
    return dxp


def _col2im_k3_loops(dcols, stride, dxp):
    b, ho, wo, _, _, c = dcols.shape
    for n in range(b):
        dxp[n] = 0
        for ki in range(3):
            for kj in range(3):
                for i in range(ho):
                    si = i * stride + ki
                    for j in range(wo):
                        dxp[n, si, j * stride + kj] += dcols[n, i, j, ki, kj]
    return dxp


# ---------------------------------------------------------------------------
# Nearest-neighbor resize of integer index grids
# ---------------------------------------------------------------------------

def np_nearest_resize(src, oh, ow):
    h, w = src.shape
    rows = (np.arange(oh) * h) // oh
    cols = (np.arange(ow) * w) // ow
    return src[rows[:, None], cols[None, :]].copy()


def _nearest_resize_loops(src, oh, ow):
    h, w = src.shape
    out = np.empty((oh, ow), dtype=src.dtype)
    for i in range(oh):
        si = (i * h) // oh
        for j in range(ow):
            out[i, j] = src[si, (j * w) // ow]
    return out


# ---------------------------------------------------------------------------
# Confusion-matrix accumulation
# ---------------------------------------------------------------------------

def np_confusion_update(truth, pred, counts):
    """Add one count per pixel at counts[truth, pred]; arrays are flat int64."""
    n = counts.shape[0]
    flat = np.bincount(truth * n + pred, minlength=n * n)
    counts += flat.reshape(n, n)
    return counts


def _confusion_update_loops(truth, pred, counts):
    for k in range(truth.shape[0]):
        counts[truth[k], pred[k]] += 1
    return counts


# ---------------------------------------------------------------------------
# Shape rasterization (exact integer-pixel-center predicates)
# ---------------------------------------------------------------------------

def np_shape_mask(kind, h, w, cx, cy, pa, pb):
    """Boolean (h, w) mask of the shape; pa/pb are per-kind size parameters.

    ellipse: pa, pb = semi-axes; rectangle: pa, pb = full width/height;
    triangle: pa, pb = base width, height (apex up); cross: pa, pb =
    full extent, arm width.
    """
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    dx = xs - cx
    dy = ys - cy
    if kind == ELLIPSE:
        return (dx / pa) ** 2 + (dy / pb) ** 2 <= 1.0
    if kind == RECTANGLE:
        return (np.abs(dx) <= pa / 2) & (np.abs(dy) <= pb / 2)
    if kind == TRIANGLE:
        top = cy - pb / 2
        frac = (ys - top) / pb
        inside_y = (frac >= 0.0) & (frac <= 1.0)
        return inside_y & (np.abs(dx) <= frac * pa / 2)
    if kind == CROSS:
        bar_h = (np.abs(dx) <= pa / 2) & (np.abs(dy) <= pb / 2)
        bar_v = (np.abs(dx) <= pb / 2) & (np.abs(dy) <= pa / 2)
        return bar_h | bar_v
    raise ValueError(f"unknown shape kind {kind}")


def _shape_mask_loops(kind, h, w, cx, cy, pa, pb):
    out = np.zeros((h, w), dtype=np.bool_)
    for i in range(h):
        dy = i - cy
        for j in range(w):
            dx = j - cx
            if kind == ELLIPSE:
                inside = (dx / pa) ** 2 + (dy / pb) ** 2 <= 1.0
            elif kind == RECTANGLE:
                inside = abs(dx) <= pa / 2 and abs(dy) <= pb / 2
            elif kind == TRIANGLE:
                frac = (i - (cy - pb / 2)) / pb
                inside = 0.0 <= frac <= 1.0 and abs(dx) <= frac * pa / 2
            else:
                inside = (abs(dx) <= pa / 2 and abs(dy) <= pb / 2) or \
                         (abs(dx) <= pb / 2 and abs(dy) <= pa / 2)
            out[i, j] = inside
    return out


if USE_NUMBA:
    nb_im2col_k3 = njit(cache=True)(_im2col_k3_loops)
    nb_col2im_k3 = njit(cache=True)(_col2im_k3_loops)
    nb_nearest_resize = njit(cache=True)(_nearest_resize_loops)
    nb_confusion_update = njit(cache=True)(_confusion_update_loops)
    nb_shape_mask = njit(cache=True)(_shape_mask_loops)

    # Per-kernel binding follows benchmarks/kernel_bench.py: the jitted
    # per-pixel kernels win, while the patch gather/scatter moves more
    # bytes per call and runs faster as a handful of big strided numpy
    # copies that share the machine nicely with BLAS.
    im2col_k3 = np_im2col_k3
    col2im_k3 = np_col2im_k3
    nearest_resize = nb_nearest_resize
    confusion_update = nb_confusion_update
    shape_mask = nb_shape_mask
else:
    im2col_k3 = np_im2col_k3
    col2im_k3 = np_col2im_k3
    nearest_resize = np_nearest_resize
    confusion_update = np_confusion_update
    shape_mask = np_shape_mask
