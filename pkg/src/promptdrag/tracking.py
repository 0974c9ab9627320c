"""Relocating handle points after each latent update.

Optimization moves image content, so the handle coordinates must chase
it.  The baseline tracker re-finds each handle by nearest-neighbor
feature matching in a local window.  The fast tracker additionally
discards every candidate that does not move the handle strictly closer
to its target, which both prunes the search and guarantees the
handle-to-target distance decreases monotonically until convergence.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .geometry import (
    DragPair,
    FeatureMap,
    PixelPoint,
    bilinear_sample,
    euclidean_distance,
    patch_points,
)

STRATEGIES = ("PT", "FPT")

# which point indexes the reference features: the handle's original
# position (default) or its current, already-moved position
REFERENCE_POINTS = ("origin", "moving")


class TrackingError(RuntimeError):
    """Raised on malformed tracking inputs."""


@dataclass(frozen=True)
class TrackingStep:
    """One relocation decision for one pair."""

    pair_index: int
    old_handle: PixelPoint
    new_handle: PixelPoint
    candidate_count: int
    feature_distance: float
    strategy: str

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.candidate_count < 0:
            raise ValueError("candidate_count must be >= 0")


def _feature_l1(features: FeatureMap, p: PixelPoint, reference: torch.Tensor) -> float:
    return float((bilinear_sample(features, p) - reference).abs().sum())


def _reference_vector(
    features_0: FeatureMap, handle_0: PixelPoint, handle_k: PixelPoint, reference_point: str
) -> torch.Tensor:
    if reference_point not in REFERENCE_POINTS:
        raise TrackingError(f"reference_point must be one of {REFERENCE_POINTS}")
    anchor = handle_0 if reference_point == "origin" else handle_k
    return bilinear_sample(features_0, anchor).detach()


def _argmin_candidates(
    features_k1: FeatureMap,
    candidates: list[PixelPoint],
    reference: torch.Tensor,
    target: PixelPoint | None,
) -> tuple[PixelPoint, float]:
    """Candidate with the smallest feature distance to the reference.

    Exact feature-distance ties fall back to whichever candidate lies
    closest to the target, then to enumeration (row-major) order.
    """
    best = None
    best_key = None
    for cand in candidates:
        dist = _feature_l1(features_k1, cand, reference)
        to_target = euclidean_distance(cand, target) if target is not None else 0.0
        key = (dist, to_target)
        if best_key is None or key < best_key:
            best = cand
            best_key = key
    assert best is not None
    return best, best_key[0]


def _approaching_candidates(
    handle: PixelPoint, target: PixelPoint, r2: int, bounds: tuple[int, int]
) -> list[PixelPoint]:
    current_distance = euclidean_distance(handle, target)
    return [
        c
        for c in patch_points(handle, r2, bounds)
        if euclidean_distance(c, target) < current_distance
    ]


def track_point_nn(
    features_k1: FeatureMap,
    features_0: FeatureMap,
    handle_0: PixelPoint,
    handle_k: PixelPoint,
    r2: int,
    target: PixelPoint | None = None,
    reference_point: str = "origin",
) -> PixelPoint:
    """Baseline nearest-neighbor tracking over the full search window."""
    reference = _reference_vector(features_0, handle_0, handle_k, reference_point)
    bounds = (features_k1.height, features_k1.width)
    candidates = patch_points(handle_k, r2, bounds)
    point, _ = _argmin_candidates(features_k1, candidates, reference, target)
    return point


def track_point_fast(
    features_k1: FeatureMap,
    features_0: FeatureMap,
    handle_0: PixelPoint,
    handle_k: PixelPoint,
    target: PixelPoint,
    r2: int,
    reference_point: str = "origin",
) -> PixelPoint:
    """Nearest-neighbor tracking over candidates strictly closer to the target.

    An empty filtered window keeps the handle where it is, so repeated
    relocations either shrink the target distance or stop.
    """
    reference = _reference_vector(features_0, handle_0, handle_k, reference_point)
    bounds = (features_k1.height, features_k1.width)
    candidates = _approaching_candidates(handle_k, target, r2, bounds)
    if not candidates:
        return handle_k
    point, _ = _argmin_candidates(features_k1, candidates, reference, target)
    return point


def update_handles(
    pairs: list[DragPair],
    features_k1: FeatureMap,
    features_0: FeatureMap,
    r2: int,
    strategy: str = "FPT",
    reference_point: str = "origin",
    deactivate_below: float = 1.0,
) -> tuple[list[DragPair], list[TrackingStep]]:
    """Track every active pair and retire the ones that have arrived.

    A pair whose relocated handle lies within ``deactivate_below`` grid
    units of its target flips inactive and is skipped from then on.
    """
    if strategy not in STRATEGIES:
        raise TrackingError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    bounds = (features_k1.height, features_k1.width)
    updated = []
    steps = []
    for index, pair in enumerate(pairs):
        if not pair.active:
            updated.append(pair)
            continue
        reference = _reference_vector(features_0, pair.origin, pair.handle, reference_point)
        if strategy == "FPT":
            candidates = _approaching_candidates(pair.handle, pair.target, r2, bounds)
        else:
            candidates = patch_points(pair.handle, r2, bounds)
        if candidates:
            new_handle, feature_distance = _argmin_candidates(
                features_k1, candidates, reference, pair.target
            )
        else:
            new_handle = pair.handle
            feature_distance = _feature_l1(features_k1, pair.handle, reference)
        still_active = euclidean_distance(new_handle, pair.target) >= deactivate_below
        updated.append(pair.moved(new_handle, active=still_active))
        steps.append(
            TrackingStep(
                pair_index=index,
                old_handle=pair.handle,
                new_handle=new_handle,
                candidate_count=len(candidates),
                feature_distance=feature_distance,
                strategy=strategy,
            )
        )
    return updated, steps
