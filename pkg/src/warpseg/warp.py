"""Backward warping of images and feature maps along motion maps.

Convention: the displacement stored at pixel ``p`` of the current frame
points from its source in the previous frame, so the current value is read
from ``prev[p - mv[p]]``. Sources that fall outside the image are clamped to
the nearest edge pixel.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .tensor import ShapeError, Tensor, _make


@dataclass(eq=False)
class MotionMap:
    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        self.dx = np.asarray(self.dx)
        self.dy = np.asarray(self.dy)
        if self.dx.shape != self.dy.shape or self.dx.ndim != 2:
            raise ShapeError(f"motion planes must be 2-d and equal, got {self.dx.shape}/{self.dy.shape}")
        if not (np.isfinite(self.dx).all() and np.isfinite(self.dy).all()):
            raise ValueError("motion map has non-finite displacements")

    @property
    def height(self):
        return self.dx.shape[0]

    @property
    def width(self):
        return self.dx.shape[1]

    @classmethod
    def zeros(cls, height, width, dtype=np.float32):
        return cls(np.zeros((height, width), dtype), np.zeros((height, width), dtype))

    @classmethod
    def uniform(cls, height, width, dx=0.0, dy=0.0, dtype=np.float32):
        return cls(np.full((height, width), dx, dtype), np.full((height, width), dy, dtype))

    def __eq__(self, other):
        return (isinstance(other, MotionMap)
                and self.dx.dtype == other.dx.dtype
                and np.array_equal(self.dx, other.dx) and np.array_equal(self.dy, other.dy))

    def pooled(self, stride):
        """Block-average to feature resolution and rescale to feature-cell units."""
        if stride == 1:
            return self.dx.astype(np.float64), self.dy.astype(np.float64)
        h, w = self.dx.shape
        if h % stride or w % stride:
            raise ShapeError(f"stride {stride} does not divide motion map {h}x{w}")
        def pool(a):
            return a.astype(np.float64).reshape(h // stride, stride, w // stride, stride).mean(axis=(1, 3)) / stride
        return pool(self.dx), pool(self.dy)


@dataclass(eq=False)
class FeatureMap:
    """A 1×C×h×w (or N×C×h×w) activation tensor tagged with its stride."""
    tensor: Tensor
    stride: int

    @property
    def shape(self):
        return self.tensor.shape

    @property
    def channels(self):
        return self.tensor.shape[1]

    @property
    def spatial(self):
        return self.tensor.shape[2:]


def _source_coords(dx, dy):
    h, w = dx.shape
    ys, xs = np.mgrid[0:h, 0:w]
    sx = np.clip(xs - dx.astype(np.float64), 0.0, w - 1)
    sy = np.clip(ys - dy.astype(np.float64), 0.0, h - 1)
    return sx, sy


def warp_image(prev, mv, mode="nearest"):
    """Warp an H×W or H×W×C image by ``mv`` with clamp-to-edge borders."""
    prev = np.asarray(prev)
    if prev.shape[:2] != (mv.height, mv.width):
        raise ShapeError(f"image {prev.shape[:2]} and motion {mv.height}x{mv.width} differ")
    h, w = prev.shape[:2]
    sx, sy = _source_coords(mv.dx, mv.dy)
    if mode == "nearest":
        ix = np.floor(sx + 0.5).astype(np.int64)
        iy = np.floor(sy + 0.5).astype(np.int64)
        return prev[np.minimum(iy, h - 1), np.minimum(ix, w - 1)]
    if mode != "bilinear":
        raise ValueError(f"unknown warp mode {mode!r}")
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = sx - x0
    ay = sy - y0
    if prev.ndim == 3:
        ax, ay = ax[..., None], ay[..., None]
    src = prev.astype(np.float64)
    top = src[y0, x0] * (1 - ax) + src[y0, x1] * ax
    bot = src[y1, x0] * (1 - ax) + src[y1, x1] * ax
    return top * (1 - ay) + bot * ay


def warp_matrix(dx, dy):
    """Sparse (h·w)×(h·w) bilinear sampling operator for one motion field."""
    h, w = dx.shape
    sx, sy = _source_coords(dx, dy)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = (sx - x0).ravel()
    ay = (sy - y0).ravel()
    # four taps per output row, already in row order, so CSR is built directly
    cols = np.stack([(y0 * w + x0).ravel(), (y0 * w + x1).ravel(),
                     (y1 * w + x0).ravel(), (y1 * w + x1).ravel()], axis=1).ravel()
    vals = np.stack([(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay], axis=1).ravel()
    indptr = np.arange(0, 4 * h * w + 1, 4)
    return sparse.csr_matrix((vals, cols, indptr), shape=(h * w, h * w))


def warp_features(prev_feat, mv):
    """Warp a FeatureMap by full-resolution motion (one MotionMap per batch item)."""
    mvs = mv if isinstance(mv, (list, tuple)) else [mv]
    x = prev_feat.tensor
    n, c, h, w = x.shape
    s = prev_feat.stride
    if len(mvs) != n:
        raise ShapeError(f"{len(mvs)} motion maps for a batch of {n}")
    mats = []
    for m in mvs:
        if (m.height, m.width) != (h * s, w * s):
            raise ShapeError(f"motion {m.height}x{m.width} does not match features {h}x{w} at stride {s}")
        mats.append(warp_matrix(*m.pooled(s)))
    flat = x.data.reshape(n, c, h * w)
    out = np.stack([(mats[i] @ flat[i].T).T for i in range(n)]).reshape(n, c, h, w)

    def backward(g):
        g = g.reshape(n, c, h * w)
        return (np.stack([(mats[i].T @ g[i].T).T for i in range(n)]).reshape(n, c, h, w),)

    return FeatureMap(_make(out, (x,), backward), s)


def reconstruct_frame(prev, mv, res):
    """Codec-style prediction: nearest warp of ``prev`` plus the residual."""
    prev = np.asarray(prev)
    res = np.asarray(res)
    if prev.shape != res.shape:
        raise ShapeError(f"image {prev.shape} and residual {res.shape} differ")
    return warp_image(prev, mv, "nearest") + res
