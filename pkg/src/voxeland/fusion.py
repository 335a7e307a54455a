"""Data association and evidential map integration.

Incoming opinions are matched to existing map instances by 3D overlap.  The
overlap count is the number of opinion points falling in voxels where the
candidate instance has evidence; from it two scores are derived:

* ``iou``  -- overlap / (points + instance voxels - overlap)
* ``ios``  -- overlap / min(points, instance voxels), which rescues matches
  of partial views that iou misses.

An opinion matches when either score passes its threshold; otherwise it
spawns a new instance.  The reserved unknown opinion is always associated
with the unknown map instance.  Every N integrated frames the map instances
are associated against each other with the same criterion and merged, which
heals over-segmentation from disjoint first observations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .frames import Frame, crop_bbox, read_ppm, write_ppm
from .opinions import ClusteringParams, SubjectiveOpinion, build_opinions
from .voxelmap import (
    UNKNOWN_INSTANCE_ID,
    InstanceRecord,
    MapState,
    Observation,
    VoxelKey,
    pack_keys,
    points_to_keys,
    unpack_key,
)

STAGE_OPINIONS = "Opinions generation"
STAGE_ASSOCIATION = "Data association"
STAGE_INTEGRATION = "Map integration"
STAGE_REFINEMENT = "Map refinement"


@dataclass
class AssociationConfig:
    tau_iou: float = 0.4
    tau_ios: float = 0.7
    refine_every: int = 30

    def __post_init__(self) -> None:
        if not (0.0 < self.tau_iou <= 1.0 and 0.0 < self.tau_ios <= 1.0):
            raise ValueError("thresholds must lie in (0, 1]")
        if self.refine_every < 1:
            raise ValueError("refine_every must be at least 1")


@dataclass
class AssociationOutcome:
    """Per-frame association result; every opinion index appears exactly once."""

    matches: list[tuple[int, int, float, float]] = field(default_factory=list)
    spawned: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class MergeEvent:
    kept_id: int
    retired_id: int
    iou: float
    ios: float


def opinion_voxel_counts(opinion: SubjectiveOpinion, voxel_size: float) -> dict[VoxelKey, int]:
    """Per-voxel point counts for an opinion, in deterministic key order."""
    keys = points_to_keys(opinion.points, voxel_size)
    packed = pack_keys(keys)
    unique, counts = np.unique(packed, return_counts=True)
    return {unpack_key(int(p)): int(c) for p, c in zip(unique, counts)}


def intersection_count(
    opinion: SubjectiveOpinion, instance: InstanceRecord, state: MapState
) -> int:
    """Number of opinion points lying in voxels where the instance has evidence."""
    total = 0
    for key, count in opinion_voxel_counts(opinion, state.voxel_size).items():
        cell = state.cells.get(key)
        if cell is not None and cell.instance_counts.get(instance.id, 0) > 0:
            total += count
    return total


def _iou_from_counts(overlap: int, n_points: int, n_voxels: int) -> float:
    # Opinion size is a point count while instance size is a voxel count, so
    # the raw ratio can exceed 1 when a dense opinion falls entirely inside a
    # small footprint; clamp to the declared [0, 1] range.
    denominator = n_points + n_voxels - overlap
    return min(1.0, overlap / denominator) if denominator > 0 else 0.0


def _ios_from_counts(overlap: int, n_points: int, n_voxels: int) -> float:
    smaller = min(n_points, n_voxels)
    return min(1.0, overlap / smaller) if smaller > 0 else 0.0


def iou(opinion: SubjectiveOpinion, instance: InstanceRecord, state: MapState) -> float:
    overlap = intersection_count(opinion, instance, state)
    return _iou_from_counts(overlap, len(opinion.points), instance.voxel_count)


def ios(opinion: SubjectiveOpinion, instance: InstanceRecord, state: MapState) -> float:
    overlap = intersection_count(opinion, instance, state)
    return _ios_from_counts(overlap, len(opinion.points), instance.voxel_count)


def associate(
    opinions: list[SubjectiveOpinion], state: MapState, config: AssociationConfig
) -> AssociationOutcome:
    """Match each opinion of one frame against the map instances.

    Semantic opinions match the candidate maximizing iou among those passing
    either threshold (ties: higher ios, then lower instance id); unmatched
    ones are marked for spawning, which registers a fresh instance id here.
    The unknown opinion is associated with the unknown instance
    unconditionally, and the unknown instance is never a candidate otherwise.
    """
    outcome = AssociationOutcome()
    for index, opinion in enumerate(opinions):
        if opinion.is_unknown:
            outcome.matches.append((index, UNKNOWN_INSTANCE_ID, 0.0, 0.0))
            continue
        voxel_counts = opinion_voxel_counts(opinion, state.voxel_size)
        overlaps: dict[int, int] = {}
        for key, count in voxel_counts.items():
            cell = state.cells.get(key)
            if cell is None:
                continue
            for instance_id, evidence in cell.instance_counts.items():
                if instance_id != UNKNOWN_INSTANCE_ID and evidence > 0:
                    overlaps[instance_id] = overlaps.get(instance_id, 0) + count
        n_points = len(opinion.points)
        best: tuple[float, float, int] | None = None  # (iou, ios, -id) ordering helper
        for instance_id in sorted(overlaps):
            record = state.instances[instance_id]
            score_iou = _iou_from_counts(overlaps[instance_id], n_points, record.voxel_count)
            score_ios = _ios_from_counts(overlaps[instance_id], n_points, record.voxel_count)
            if score_iou < config.tau_iou and score_ios < config.tau_ios:
                continue
            candidate = (score_iou, score_ios, -instance_id)
            if best is None or candidate > best:
                best = candidate
        if best is None:
            new_id = state.new_instance()
            outcome.spawned.append((index, new_id))
        else:
            outcome.matches.append((index, -best[2], best[0], best[1]))
    return outcome


def integrate_geometric(
    opinion: SubjectiveOpinion, instance_id: int, state: MapState
) -> None:
    """Register the opinion's per-voxel point counts as instance evidence.

    Each touched voxel also receives exactly one occupancy hit, so occupancy
    tracks observation rather than point sampling density.
    """
    for key, count in opinion_voxel_counts(opinion, state.voxel_size).items():
        state.add_instance_evidence(key, instance_id, count)
        state.apply_occupancy(key, hit=True)


def integrate_semantic(
    opinion: SubjectiveOpinion,
    instance_id: int,
    state: MapState,
    view_path: str | None = None,
) -> None:
    """Add the opinion's confidence to the instance's category evidence."""
    if instance_id == UNKNOWN_INSTANCE_ID:
        raise ValueError("the unknown instance cannot receive semantic evidence")
    if opinion.is_unknown:
        raise ValueError("unknown opinions carry no semantic evidence")
    record = state.instances[instance_id]
    record.category_evidence[opinion.category] = (
        record.category_evidence.get(opinion.category, 0.0) + opinion.confidence
    )
    state.register_category(opinion.category)
    record.observations.append(
        Observation(
            frame_id=opinion.source_frame,
            category=opinion.category,
            confidence=opinion.confidence,
            pixel_bbox=opinion.pixel_bbox,
            view_path=view_path,
        )
    )


def carve_free_space(
    opinion: SubjectiveOpinion,
    state: MapState,
    camera_origin: np.ndarray,
    stride_voxels: int = 4,
) -> None:
    """Optional occupancy misses along rays to observed surface voxels.

    Rays are sampled at a coarse stride; the surface voxel itself is skipped.
    Off by default in the pipeline because dense carving dominates frame cost.
    """
    origin = np.asarray(camera_origin, dtype=float)
    step = state.voxel_size * stride_voxels
    surface_keys = {
        tuple(k) for k in points_to_keys(opinion.points, state.voxel_size)
    }
    visited: set[VoxelKey] = set()
    for key in surface_keys:
        center = (np.asarray(key, dtype=float) + 0.5) * state.voxel_size
        direction = center - origin
        distance = float(np.linalg.norm(direction))
        if distance <= step:
            continue
        direction /= distance
        for t in np.arange(step, distance - state.voxel_size, step):
            sample = origin + direction * t
            sample_key = (
                int(np.floor(sample[0] / state.voxel_size)),
                int(np.floor(sample[1] / state.voxel_size)),
                int(np.floor(sample[2] / state.voxel_size)),
            )
            if sample_key in surface_keys or sample_key in visited:
                continue
            visited.add(sample_key)
            state.apply_occupancy(sample_key, hit=False)


def _instance_pair_scores(
    footprint_a: set[VoxelKey], footprint_b: set[VoxelKey]
) -> tuple[float, float]:
    overlap = len(footprint_a & footprint_b)
    size_a, size_b = len(footprint_a), len(footprint_b)
    return (
        _iou_from_counts(overlap, size_a, size_b),
        _ios_from_counts(overlap, size_a, size_b),
    )


def refine(state: MapState, config: AssociationConfig) -> list[MergeEvent]:
    """Merge map instances whose voxel footprints associate with each other.

    Matching pairs merge into the older (smaller) id: voxel evidence and
    category evidence are summed, observation logs concatenated, and the
    newer id retired.  Repeats until no pair passes, so chained overlaps
    collapse transitively.  The unknown instance never participates.
    """
    events: list[MergeEvent] = []
    while True:
        footprints: dict[int, set[VoxelKey]] = {
            instance_id: set()
            for instance_id in state.instances
            if instance_id != UNKNOWN_INSTANCE_ID
        }
        for key, cell in state.cells.items():
            for instance_id, count in cell.instance_counts.items():
                if instance_id != UNKNOWN_INSTANCE_ID and count > 0:
                    footprints[instance_id].add(key)
        ids = sorted(footprints)
        merged = False
        for a_pos in range(len(ids)):
            if merged:
                break
            for b_pos in range(a_pos + 1, len(ids)):
                keep, retire = ids[a_pos], ids[b_pos]
                score_iou, score_ios = _instance_pair_scores(
                    footprints[keep], footprints[retire]
                )
                if score_iou >= config.tau_iou or score_ios >= config.tau_ios:
                    _merge_instances(state, keep, retire, footprints[retire])
                    events.append(
                        MergeEvent(kept_id=keep, retired_id=retire, iou=score_iou, ios=score_ios)
                    )
                    merged = True
                    break
        if not merged:
            return events


def _merge_instances(
    state: MapState, keep_id: int, retire_id: int, retire_footprint: set[VoxelKey]
) -> None:
    keep = state.instances[keep_id]
    retire = state.instances[retire_id]
    for key in retire_footprint:
        cell = state.cells[key]
        moved = cell.instance_counts.pop(retire_id)
        previous = cell.instance_counts.get(keep_id, 0)
        if previous == 0:
            keep.voxel_count += 1
        cell.instance_counts[keep_id] = previous + moved
    for category, mass in retire.category_evidence.items():
        keep.category_evidence[category] = keep.category_evidence.get(category, 0.0) + mass
    keep.observations.extend(retire.observations)
    # evidence changed; any earlier declaration is stale
    keep.final_category = None
    keep.flagged = False
    del state.instances[retire_id]


@dataclass
class StageTimer:
    """Accumulates wall-clock time per pipeline stage."""

    totals: dict[str, float] = field(
        default_factory=lambda: {
            STAGE_OPINIONS: 0.0,
            STAGE_ASSOCIATION: 0.0,
            STAGE_INTEGRATION: 0.0,
            STAGE_REFINEMENT: 0.0,
        }
    )
    counts: dict[str, int] = field(
        default_factory=lambda: {
            STAGE_OPINIONS: 0,
            STAGE_ASSOCIATION: 0,
            STAGE_INTEGRATION: 0,
            STAGE_REFINEMENT: 0,
        }
    )
    frames: int = 0
    elapsed: float = 0.0

    def record(self, stage: str, seconds: float) -> None:
        self.totals[stage] += seconds
        self.counts[stage] += 1

    def report(self) -> dict:
        stages = {}
        for stage, total in self.totals.items():
            runs = self.counts[stage]
            stages[stage] = {
                "mean_ms": (total / runs * 1000.0) if runs else 0.0,
                "runs": runs,
            }
        hz = self.frames / self.elapsed if self.elapsed > 0 else 0.0
        return {"stages": stages, "frames": self.frames, "frame_rate_hz": hz}


class Pipeline:
    """Frame-to-frame mapping driver owning a MapState.

    When ``view_store`` is set and a frame's manifest record carries an RGB
    path, the bbox crop of every integrated semantic opinion is archived
    there and its path recorded in the observation log for later view
    selection.
    """

    def __init__(
        self,
        state: MapState,
        clustering: ClusteringParams,
        association: AssociationConfig | None = None,
        max_range: float = 4.0,
        carve: bool = False,
        carve_stride: int = 4,
        view_store: Path | str | None = None,
    ) -> None:
        self.state = state
        self.clustering = clustering
        self.association = association or AssociationConfig()
        self.max_range = max_range
        self.carve = carve
        self.carve_stride = carve_stride
        self.view_store = Path(view_store) if view_store is not None else None
        self.timer = StageTimer()

    def _archive_view(self, frame: Frame, opinion: SubjectiveOpinion, instance_id: int) -> str | None:
        if (
            self.view_store is None
            or frame.record.rgb_path is None
            or opinion.pixel_bbox is None
        ):
            return None
        self.view_store.mkdir(parents=True, exist_ok=True)
        image = read_ppm(frame.record.rgb_path)
        crop = crop_bbox(image, opinion.pixel_bbox)
        path = self.view_store / f"inst{instance_id:04d}_frame{frame.frame_id:05d}.ppm"
        write_ppm(path, crop)
        return str(path)

    def process_frame(self, frame: Frame) -> AssociationOutcome:
        """build opinions -> associate -> integrate -> refine when due."""
        start = time.perf_counter()
        opinions = build_opinions(
            frame, frame.record.intrinsics, frame.record.pose, self.clustering, self.max_range
        )
        mark = time.perf_counter()
        self.timer.record(STAGE_OPINIONS, mark - start)

        outcome = associate(opinions, self.state, self.association)
        now = time.perf_counter()
        self.timer.record(STAGE_ASSOCIATION, now - mark)
        mark = now

        assignments = list(outcome.matches) + [
            (index, instance_id, 0.0, 0.0) for index, instance_id in outcome.spawned
        ]
        assignments.sort(key=lambda item: item[0])
        for index, instance_id, _, _ in assignments:
            opinion = opinions[index]
            integrate_geometric(opinion, instance_id, self.state)
            if not opinion.is_unknown:
                view_path = self._archive_view(frame, opinion, instance_id)
                integrate_semantic(opinion, instance_id, self.state, view_path=view_path)
            if self.carve:
                carve_free_space(
                    opinion, self.state, frame.record.pose.translation, self.carve_stride
                )
        self.state.frames_integrated += 1
        now = time.perf_counter()
        self.timer.record(STAGE_INTEGRATION, now - mark)
        mark = now

        if self.state.frames_integrated % self.association.refine_every == 0:
            refine(self.state, self.association)
            self.timer.record(STAGE_REFINEMENT, time.perf_counter() - mark)

        self.timer.frames += 1
        self.timer.elapsed += time.perf_counter() - start
        return outcome
