"""Turn one decoded frame into subjective opinions.

Each surviving network prediction becomes an opinion: its masked pixels are
back-projected to world-frame points, coarsely voxelized, and cleaned with
density-based clustering so that stray background points leaking into the 2D
mask do not pollute the map.  Valid depth not covered by any prediction mask
becomes a single reserved ``unknown`` opinion, which skips the clustering
filter (it is background by definition).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .frames import CameraIntrinsics, Frame, Pose, backproject_pixels

UNKNOWN_CATEGORY = "unknown"

NOISE = -1


@dataclass
class ClusteringParams:
    """Coarse-grid DBSCAN parameters for geometric opinion filtering."""

    coarse_voxel: float
    eps: float
    min_pts: int

    def __post_init__(self) -> None:
        if self.coarse_voxel <= 0 or self.eps <= 0 or self.min_pts <= 0:
            raise ValueError("clustering parameters must be positive")


@dataclass
class SubjectiveOpinion:
    """One prediction lifted to 3D: filtered points plus category evidence."""

    points: np.ndarray  # (n, 3) world-frame meters
    category: str
    confidence: float
    source_frame: int
    pixel_bbox: tuple[int, int, int, int] | None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("an opinion needs at least one point")

    @property
    def is_unknown(self) -> bool:
        return self.category == UNKNOWN_CATEGORY


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density-based clustering; returns one label per point, -1 for noise.

    Core points have at least ``min_pts`` neighbors within ``eps`` (inclusive,
    counting the point itself).  Cluster ids follow discovery order over the
    input, so a border point reachable from several clusters deterministically
    joins the lowest cluster id.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = len(points)
    labels = np.full(n, NOISE, dtype=int)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neighborhoods = tree.query_ball_point(points, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neighborhoods])
    visited = np.zeros(n, dtype=bool)
    cluster_id = 0
    for seed in range(n):
        if visited[seed] or not core[seed]:
            continue
        # breadth-first expansion from this core point
        queue = [seed]
        visited[seed] = True
        labels[seed] = cluster_id
        while queue:
            current = queue.pop()
            if not core[current]:
                continue
            for neighbor in neighborhoods[current]:
                if labels[neighbor] == NOISE:
                    labels[neighbor] = cluster_id
                if not visited[neighbor]:
                    visited[neighbor] = True
                    queue.append(neighbor)
        cluster_id += 1
    return labels


def filter_geometric_opinion(points: np.ndarray, params: ClusteringParams) -> np.ndarray:
    """Keep only the points whose coarse voxel belongs to the largest cluster.

    Points are downsampled to distinct coarse-voxel centers, DBSCAN runs on
    the centers, and the winning cluster is the largest one (ties broken by
    the lowest cluster id).  Returns an empty array when every center is
    noise, which the caller treats as a rejected opinion.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("cannot filter an empty point set")
    keys = np.floor(points / params.coarse_voxel).astype(np.int64)
    unique_keys, inverse = np.unique(keys, axis=0, return_inverse=True)
    centers = (unique_keys.astype(float) + 0.5) * params.coarse_voxel
    labels = dbscan(centers, eps=params.eps, min_pts=params.min_pts)
    if np.all(labels == NOISE):
        return points[:0]
    counts = np.bincount(labels[labels != NOISE])
    winner = int(np.argmax(counts))  # argmax returns the lowest id on ties
    keep_center = labels == winner
    return points[keep_center[inverse]]


def build_opinions(
    frame: Frame,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    params: ClusteringParams,
    max_range: float = 4.0,
) -> list[SubjectiveOpinion]:
    """Build one opinion per surviving prediction plus one unknown opinion.

    Prediction masks may overlap; a pixel claimed by several predictions
    contributes to each of them, but never to the unknown opinion.  Opinions
    whose masks cover no valid depth, or whose coarse clusters are all noise,
    are dropped.
    """
    depth = frame.depth.values
    valid = (depth != 0) & (depth.astype(float) * intrinsics.depth_scale <= max_range)
    claimed = np.zeros_like(valid, dtype=bool)
    opinions: list[SubjectiveOpinion] = []

    for prediction in frame.predictions:
        mask = prediction.mask(frame.depth.width, frame.depth.height)
        claimed |= mask
        selected = mask & valid
        if not selected.any():
            continue
        vs, us = np.nonzero(selected)
        points, _ = backproject_pixels(us, vs, depth[vs, us], intrinsics, pose, max_range)
        filtered = filter_geometric_opinion(points, params)
        if len(filtered) == 0:
            continue
        mask_vs, mask_us = np.nonzero(mask)
        bbox = (int(mask_us.min()), int(mask_vs.min()), int(mask_us.max()), int(mask_vs.max()))
        opinions.append(
            SubjectiveOpinion(
                points=filtered,
                category=prediction.category,
                confidence=prediction.confidence,
                source_frame=frame.frame_id,
                pixel_bbox=bbox,
            )
        )

    background = valid & ~claimed
    if background.any():
        vs, us = np.nonzero(background)
        points, _ = backproject_pixels(us, vs, depth[vs, us], intrinsics, pose, max_range)
        if len(points) > 0:
            opinions.append(
                SubjectiveOpinion(
                    points=points,
                    category=UNKNOWN_CATEGORY,
                    confidence=1.0,
                    source_frame=frame.frame_id,
                    pixel_bbox=None,
                )
            )
    return opinions
