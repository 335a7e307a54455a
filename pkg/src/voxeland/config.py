"""One structured configuration gathering every tunable of the pipeline.

Every key has a documented default; a JSON file may override any subset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .fusion import AssociationConfig
from .opinions import ClusteringParams
from .voxelmap import OccupancyParams


@dataclass
class PipelineConfig:
    # map
    voxel_size: float = 0.02
    # opinion building
    coarse_voxel: float | None = None  # default: 4 * voxel_size
    dbscan_eps_factor: float = 1.8
    dbscan_min_pts: int = 4
    max_range: float = 4.0
    # association / refinement
    tau_iou: float = 0.4
    tau_ios: float = 0.7
    refine_every: int = 30
    # occupancy
    p_hit: float = 0.7
    p_miss: float = 0.4
    log_odds_min: float = -2.0
    log_odds_max: float = 3.5
    carve_free_space: bool = False
    carve_stride: int = 4
    # declaration / disambiguation
    entropy_threshold: float = 0.5
    min_prob: float = 0.15
    views_per_candidate: int = 3
    archive_views: bool = False
    # evaluation
    iou_threshold: float = 0.5
    eval_classes: list[str] | None = None
    # HTTP decision client
    endpoint: str = ""
    api_key_env: str = ""
    model: str = ""
    timeout_s: float = 30.0

    extras: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_file(cls, path: Path | str) -> "PipelineConfig":
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in fields(cls) if f.name != "extras"}
        kwargs = {key: value for key, value in obj.items() if key in known}
        config = cls(**kwargs)
        config.extras = {key: value for key, value in obj.items() if key not in known}
        return config

    def clustering_params(self) -> ClusteringParams:
        coarse = self.coarse_voxel if self.coarse_voxel is not None else 4.0 * self.voxel_size
        return ClusteringParams(
            coarse_voxel=coarse,
            eps=self.dbscan_eps_factor * coarse,
            min_pts=self.dbscan_min_pts,
        )

    def association_config(self) -> AssociationConfig:
        return AssociationConfig(
            tau_iou=self.tau_iou, tau_ios=self.tau_ios, refine_every=self.refine_every
        )

    def occupancy_params(self) -> OccupancyParams:
        return OccupancyParams(
            p_hit=self.p_hit,
            p_miss=self.p_miss,
            log_odds_min=self.log_odds_min,
            log_odds_max=self.log_odds_max,
        )
