"""Points, drag pairs, patch enumeration and bilinear feature sampling.

Coordinate convention used across the whole package: ``x`` is the column,
``y`` is the row, origin at the top-left of the image/feature grid. Points
may be fractional; patch enumeration and point tracking operate on the
integer grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch


class DegeneratePairError(ValueError):
    """Handle and target coincide; the pair must be deactivated, not dragged."""


@dataclass(frozen=True)
class PixelPoint:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"point coordinates must be finite, got ({self.x}, {self.y})")

    def as_tuple(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class DragPair:
    """One handle/target couple. ``origin`` keeps the initial handle position,

    which point tracking and evaluation use as the reference location after
    the handle has moved. ``active`` flips to False once the handle is within
    the convergence threshold of the target.
    """

    handle: PixelPoint
    target: PixelPoint
    active: bool = True
    origin: PixelPoint | None = None

    def __post_init__(self):
        if self.origin is None:
            object.__setattr__(self, "origin", self.handle)

    def distance_to_target(self) -> float:
        return euclidean_distance(self.handle, self.target)

    def moved(self, new_handle: PixelPoint, active: bool = True) -> "DragPair":
        return replace(self, handle=new_handle, active=active)


class FeatureMap:
    """A channels x height x width grid of real values.

    Thin wrapper over a torch tensor so sampling helpers can state their
    contract once; the underlying tensor stays exposed for autodiff.
    """

    def __init__(self, values: torch.Tensor):
        if values.dim() != 3:
            raise ValueError(f"feature map must be (channels, height, width), got {tuple(values.shape)}")
        if values.shape[1] < 1 or values.shape[2] < 1:
            raise ValueError("feature map spatial dims must be >= 1")
        self.values = values

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def detach(self) -> "FeatureMap":
        return FeatureMap(self.values.detach())


def unit_direction(handle: PixelPoint, target: PixelPoint) -> torch.Tensor:
    """Unit vector (dx, dy) pointing from ``handle`` to ``target``."""
    dx = target.x - handle.x
    dy = target.y - handle.y
    norm = math.hypot(dx, dy)
    if norm == 0.0:
        raise DegeneratePairError("handle coincides with target; deactivate the pair instead of dragging it")
    return torch.tensor([dx / norm, dy / norm], dtype=torch.float64)


def euclidean_distance(a: PixelPoint, b: PixelPoint) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def patch_points(center: PixelPoint, radius: int, bounds: tuple[int, int]) -> list[PixelPoint]:
    """Integer grid points in the Chebyshev box of ``radius`` around ``center``.

    ``bounds`` is (height, width); points outside the grid are clipped away,
    so the result has at most (2*radius+1)**2 entries.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    height, width = bounds
    cx, cy = int(round(center.x)), int(round(center.y))
    x_lo, x_hi = max(cx - radius, 0), min(cx + radius, width - 1)
    y_lo, y_hi = max(cy - radius, 0), min(cy + radius, height - 1)
    return [PixelPoint(float(x), float(y)) for y in range(y_lo, y_hi + 1) for x in range(x_lo, x_hi + 1)]


def bilinear_sample(feature_map: FeatureMap, p: PixelPoint) -> torch.Tensor:
    """Bilinearly interpolated channel vector at a fractional point.

    Coordinates outside the map are clamped to the border cell, so drags
    next to an image edge never index out of range. At integer coordinates
    the result equals direct indexing exactly.
    """
    values = feature_map.values
    h, w = feature_map.height, feature_map.width
    x = min(max(p.x, 0.0), float(w - 1))
    y = min(max(p.y, 0.0), float(h - 1))

    x0 = min(int(math.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(math.floor(y)), h - 2) if h > 1 else 0
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0

    top = values[:, y0, x0] * (1.0 - fx) + values[:, y0, x1] * fx
    bottom = values[:, y1, x0] * (1.0 - fx) + values[:, y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def to_feature_coords(p: PixelPoint, image_dims: tuple[int, int], feature_dims: tuple[int, int]) -> PixelPoint:
    """Rescale an image-space point onto the feature grid proportionally.

    ``image_dims`` and ``feature_dims`` are (height, width).
    """
    ih, iw = image_dims
    fh, fw = feature_dims
    return PixelPoint(p.x * (fw / iw), p.y * (fh / ih))
