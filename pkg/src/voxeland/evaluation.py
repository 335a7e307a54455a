"""Instance-level evaluation against pre-voxelized ground truth.

A map instance's predicted footprint is the set of voxels it owns by argmax
evidence; its claimed category is the declared final category when one was
set, otherwise the top-probability category (the plain top-1 baseline).
Predictions are greedily matched to same-category ground-truth instances at
a voxel IoU threshold, ranked by the map's own belief in the claimed
category, and per-class all-point average precision is aggregated into mAP.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .evidence import probabilities, shannon_entropy
from .frames import GroundTruthScene
from .voxelmap import UNKNOWN_INSTANCE_ID, MapState, VoxelKey


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    classes: list[str] | None = None  # None = classes present in ground truth

    def __post_init__(self) -> None:
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ValueError("iou_threshold must lie in (0, 1]")


@dataclass
class PredictedInstance:
    instance_id: int
    category: str
    confidence: float
    voxels: set[VoxelKey]
    semantic_entropy: float


@dataclass
class MatchRecord:
    instance_id: int
    category: str
    confidence: float
    is_tp: bool
    matched_gt: str | None
    iou: float


@dataclass
class EvalReport:
    per_class_ap: dict[str, float] = field(default_factory=dict)
    map_score: float = 0.0
    matches: list[MatchRecord] = field(default_factory=list)
    timing: dict | None = None

    SCHEMA_VERSION = 1

    def to_dict(self) -> dict:
        return {
            "schema_version": self.SCHEMA_VERSION,
            "per_class_ap": {k: self.per_class_ap[k] for k in sorted(self.per_class_ap)},
            "map_score": self.map_score,
            "matches": [
                {
                    "instance_id": m.instance_id,
                    "category": m.category,
                    "confidence": m.confidence,
                    "tp": m.is_tp,
                    "matched_gt": m.matched_gt,
                    "iou": m.iou,
                }
                for m in self.matches
            ],
            "timing": self.timing,
        }

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")


def predicted_instances(state: MapState) -> list[PredictedInstance]:
    """Non-unknown instances with argmax voxel footprints and claimed categories.

    Instances without any category evidence cannot claim a class and are
    skipped; voxels whose argmax owner is the unknown instance belong to no
    prediction.
    """
    footprints: dict[int, set[VoxelKey]] = {}
    for key, cell in state.cells.items():
        if not cell.instance_counts:
            continue
        owner = max(sorted(cell.instance_counts), key=lambda i: cell.instance_counts[i])
        if owner == UNKNOWN_INSTANCE_ID:
            continue
        footprints.setdefault(owner, set()).add(key)
    predictions = []
    for instance_id in sorted(state.instances):
        record = state.instances[instance_id]
        if record.is_unknown or not record.category_evidence:
            continue
        dist = probabilities(record.category_evidence)
        category = record.final_category
        if category is None:
            category = min(
                (label for label in dist.probs), key=lambda l: (-dist.probs[l], str(l))
            )
        predictions.append(
            PredictedInstance(
                instance_id=instance_id,
                category=str(category),
                confidence=dist[category],
                voxels=footprints.get(instance_id, set()),
                semantic_entropy=shannon_entropy(dist),
            )
        )
    return predictions


def _voxel_iou(a: set[VoxelKey], b: set[VoxelKey]) -> float:
    if not a or not b:
        return 0.0
    overlap = len(a & b)
    return overlap / (len(a) + len(b) - overlap)


def match_to_ground_truth(
    state: MapState, gt: GroundTruthScene, config: EvalConfig | None = None
) -> list[MatchRecord]:
    """Greedy confidence-ranked matching of predictions to ground truth.

    A prediction is a true positive when its voxel IoU with some not yet
    matched same-category ground-truth instance reaches the threshold; each
    ground-truth instance matches at most once.  Equal-confidence ties rank
    by lower instance id.
    """
    config = config or EvalConfig()
    predictions = sorted(
        predicted_instances(state), key=lambda p: (-p.confidence, p.instance_id)
    )
    matched_gt: set[str] = set()
    records = []
    for prediction in predictions:
        best_iou = 0.0
        best_gt = None
        for gt_instance in gt.instances:
            if gt_instance.category != prediction.category or gt_instance.id in matched_gt:
                continue
            overlap_iou = _voxel_iou(prediction.voxels, gt_instance.voxels)
            if overlap_iou > best_iou:
                best_iou = overlap_iou
                best_gt = gt_instance.id
        is_tp = best_gt is not None and best_iou >= config.iou_threshold
        if is_tp:
            matched_gt.add(best_gt)
        records.append(
            MatchRecord(
                instance_id=prediction.instance_id,
                category=prediction.category,
                confidence=prediction.confidence,
                is_tp=is_tp,
                matched_gt=best_gt if is_tp else None,
                iou=best_iou,
            )
        )
    return records


def average_precision(ranked_tp_flags: list[bool], num_gt: int) -> float | None:
    """All-point interpolated AP over a confidence-ranked TP/FP sequence.

    Precision is taken as the running maximum from the right of the PR curve.
    Returns None when the class has no ground truth (excluded from mAP).
    """
    if num_gt <= 0:
        return None
    if not ranked_tp_flags:
        return 0.0
    precisions = []
    recalls = []
    tp = 0
    for rank, flag in enumerate(ranked_tp_flags, start=1):
        if flag:
            tp += 1
        precisions.append(tp / rank)
        recalls.append(tp / num_gt)
    # right-max interpolation
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    previous_recall = 0.0
    for precision, recall in zip(precisions, recalls):
        if recall > previous_recall:
            ap += (recall - previous_recall) * precision
            previous_recall = recall
    return ap


def evaluate(
    state: MapState,
    gt: GroundTruthScene,
    config: EvalConfig | None = None,
    timing: dict | None = None,
) -> EvalReport:
    """Per-class AP at the configured IoU threshold, averaged into mAP.

    Classes evaluated are the configured list when given, otherwise every
    class present in the ground truth; classes with predictions but no ground
    truth are excluded (reported as absent).
    """
    config = config or EvalConfig()
    matches = match_to_ground_truth(state, gt, config)
    gt_counts: dict[str, int] = {}
    for gt_instance in gt.instances:
        gt_counts[gt_instance.category] = gt_counts.get(gt_instance.category, 0) + 1
    classes = config.classes if config.classes is not None else sorted(gt_counts)
    per_class_ap: dict[str, float] = {}
    for category in classes:
        num_gt = gt_counts.get(category, 0)
        flags = [m.is_tp for m in matches if m.category == category]
        ap = average_precision(flags, num_gt)
        if ap is not None:
            per_class_ap[category] = ap
    map_score = sum(per_class_ap.values()) / len(per_class_ap) if per_class_ap else 0.0
    return EvalReport(
        per_class_ap=per_class_ap, map_score=map_score, matches=matches, timing=timing
    )


def precision_vs_entropy(
    state: MapState,
    gt: GroundTruthScene,
    thresholds: list[float],
    config: EvalConfig | None = None,
) -> list[tuple[float, float]]:
    """Precision over predictions with semantic entropy below each threshold.

    Thresholds admitting no prediction yield no curve point.  Correctness is
    the TP/FP outcome of the standard matching.
    """
    matches = match_to_ground_truth(state, gt, config)
    entropy_by_id = {p.instance_id: p.semantic_entropy for p in predicted_instances(state)}
    points = []
    for threshold in thresholds:
        subset = [m for m in matches if entropy_by_id[m.instance_id] < threshold]
        if not subset:
            continue
        precision = sum(1 for m in subset if m.is_tp) / len(subset)
        points.append((threshold, precision))
    return points
