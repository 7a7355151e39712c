"""Similarity alignment, image warping, landmark heatmaps and the inter-pupil scale."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .core import LEFT_EYE, RIGHT_EYE, GrayImage, LandmarkSet, ValidationError, as_points

HEATMAP_RADIUS = 16.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    """p -> scale * R(rotation) @ p + translation."""

    scale: float = 1.0
    rotation: float = 0.0
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise GeometryError(f"invalid transform: scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", (float(self.translation[0]), float(self.translation[1])))

    @property
    def matrix(self) -> np.ndarray:
        """2x2 linear part."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * np.array([[c, -s], [s, c]])

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    @classmethod
    def from_params(cls, a: float, b: float, tx: float, ty: float) -> "SimilarityTransform":
        """Build from the linear form [[a, -b], [b, a]] plus translation."""
        return cls(math.hypot(a, b), math.atan2(b, a), (tx, ty))

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) @ self.matrix.T + np.asarray(self.translation)


def estimate_similarity_transform(src: LandmarkSet | np.ndarray, dst: LandmarkSet | np.ndarray) -> SimilarityTransform:
    """Least-squares similarity mapping ``src`` onto ``dst``."""
    p = as_points(src)
    q = as_points(dst)
    mp, mq = p.mean(axis=0), q.mean(axis=0)
    pc, qc = p - mp, q - mq
    denom = float(np.sum(pc**2))
    if denom <= 1e-24:
        raise GeometryError("degenerate source shape: all points coincide")
    a = float(np.sum(pc * qc)) / denom
    b = float(np.sum(pc[:, 0] * qc[:, 1] - pc[:, 1] * qc[:, 0])) / denom
    lin = np.array([[a, -b], [b, a]])
    t = mq - lin @ mp
    return SimilarityTransform.from_params(a, b, t[0], t[1])


def apply_transform(t: SimilarityTransform, s: LandmarkSet | np.ndarray, frame: str | None = None) -> LandmarkSet:
    pts = as_points(s)
    if frame is None:
        frame = s.frame if isinstance(s, LandmarkSet) else "image"
    return LandmarkSet(t(pts), frame)


def invert_transform(t: SimilarityTransform) -> SimilarityTransform:
    if not t.scale > 0:
        raise GeometryError("invalid transform: scale must be positive")
    inv_lin = np.linalg.inv(t.matrix)
    tr = -inv_lin @ np.asarray(t.translation)
    return SimilarityTransform(1.0 / t.scale, -t.rotation, (tr[0], tr[1]))


def compose_transforms(outer: SimilarityTransform, inner: SimilarityTransform) -> SimilarityTransform:
    """The transform p -> outer(inner(p))."""
    lin = outer.matrix @ inner.matrix
    tr = outer.matrix @ np.asarray(inner.translation) + np.asarray(outer.translation)
    return SimilarityTransform.from_params(lin[0, 0], lin[1, 0], tr[0], tr[1])


def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, mode: str = "zero") -> np.ndarray:
    """Sample ``img`` at fractional (x=column, y=row) positions.

    ``mode='zero'`` treats everything outside the pixel grid as 0 (values near
    the border blend towards 0); ``mode='edge'`` clamps to the nearest pixel.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if mode == "edge":
        xs = np.clip(xs, 0, w - 1)
        ys = np.clip(ys, 0, h - 1)
    elif mode != "zero":
        raise ValueError(f"unknown sampling mode {mode!r}")
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0

    def tap(yy, xx):
        ok = (xx >= 0) & (xx < w) & (yy >= 0) & (yy < h)
        vals = img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
        return np.where(ok, vals, 0.0)

    return (
        tap(y0, x0) * (1 - fx) * (1 - fy)
        + tap(y0, x0 + 1) * fx * (1 - fy)
        + tap(y0 + 1, x0) * (1 - fx) * fy
        + tap(y0 + 1, x0 + 1) * fx * fy
    )


def warp_image(img: GrayImage | np.ndarray, t: SimilarityTransform, out_size: tuple[int, int] | None = None) -> GrayImage:
    """Resample ``img`` so that output pixel p shows input pixel t^-1(p)."""
    px = img.pixels if isinstance(img, GrayImage) else np.asarray(img, dtype=np.float64)
    h, w = out_size or px.shape
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    grid = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = invert_transform(t)(grid)
    out = bilinear_sample(px, src[:, 0], src[:, 1], mode="zero").reshape(h, w)
    return GrayImage(out)


def generate_landmark_heatmap(s: LandmarkSet | np.ndarray, size: int, radius: float = HEATMAP_RADIUS) -> np.ndarray:
    """1 / (1 + distance to the nearest landmark), zero beyond ``radius``."""
    pts = as_points(s)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    best = np.full((size, size), np.inf)
    for x, y in pts:
        np.minimum(best, np.hypot(xs - x, ys - y), out=best)
    return np.where(best <= radius, 1.0 / (1.0 + best), 0.0)


def eye_centers(gt: LandmarkSet | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pts = as_points(gt)
    return pts[list(LEFT_EYE)].mean(axis=0), pts[list(RIGHT_EYE)].mean(axis=0)


def interpupil_distance(gt: LandmarkSet | np.ndarray) -> float:
    left, right = eye_centers(gt)
    d = float(np.linalg.norm(left - right))
    if d <= 0:
        raise ValidationError("inter-pupil distance is zero; landmark normalization undefined")
    return d


def mean_shape(shapes: Iterable[LandmarkSet | np.ndarray], iterations: int = 5) -> LandmarkSet:
    """Generalized-Procrustes mean, kept at the raw mean's position and size.

    Each shape is similarity-aligned to the running mean, the aligned shapes are
    averaged, and the result is re-anchored to the centroid and RMS radius of
    the plain coordinate mean so that it stays in the image frame.
    """
    arr = np.stack([as_points(s) for s in shapes])
    if len(arr) == 0:
        raise ValidationError("mean_shape needs at least one shape")
    raw = arr.mean(axis=0)
    centre = raw.mean(axis=0)
    radius = np.sqrt(np.mean(np.sum((raw - centre) ** 2, axis=1)))
    ref = raw
    for _ in range(iterations):
        aligned = np.stack([estimate_similarity_transform(s, ref)(s) for s in arr])
        m = aligned.mean(axis=0)
        mc = m - m.mean(axis=0)
        r = np.sqrt(np.mean(np.sum(mc**2, axis=1)))
        ref = mc * (radius / r) + centre
    return LandmarkSet(ref, "canonical")
