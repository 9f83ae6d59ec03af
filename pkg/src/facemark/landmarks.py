"""Ordered 2D landmark sets with visibility masks.

Coordinates are float64 in whatever frame the caller is working in: pixel
coordinates before cropping, normalized crop coordinates ([0, 1] over the
crop square) afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatchError


@dataclass(frozen=True)
class LandmarkSet:
    """N ordered (x, y) points plus a per-point visibility mask."""

    points: np.ndarray
    visibility: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeMismatchError(f"landmark array must be (N, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        vis = self.visibility
        if vis is None:
            vis = np.ones(len(pts), dtype=bool)
        else:
            vis = np.asarray(vis, dtype=bool)
            if vis.shape != (len(pts),):
                raise ShapeMismatchError(
                    f"visibility must be ({len(pts)},), got {vis.shape}"
                )
        pts.setflags(write=False)
        vis.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "visibility", vis)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def num_visible(self) -> int:
        return int(self.visibility.sum())

    def visible_points(self) -> np.ndarray:
        return self.points[self.visibility]

    def transformed(self, linear: np.ndarray, offset: np.ndarray) -> "LandmarkSet":
        """Apply p -> linear @ p + offset to every point; visibility unchanged."""
        linear = np.asarray(linear, dtype=np.float64)
        offset = np.asarray(offset, dtype=np.float64)
        return LandmarkSet(self.points @ linear.T + offset, self.visibility)

    def permuted(self, perm: np.ndarray) -> "LandmarkSet":
        """Reorder points so entry i becomes the old entry perm[i]."""
        perm = np.asarray(perm, dtype=np.intp)
        if perm.shape != (len(self),):
            raise ShapeMismatchError("permutation length must match landmark count")
        return LandmarkSet(self.points[perm], self.visibility[perm])

    def with_visibility(self, visibility) -> "LandmarkSet":
        return LandmarkSet(self.points, visibility)
