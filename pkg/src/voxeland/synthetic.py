"""Synthetic desk-scale scene generation in the on-disk dataset format.

Scenes are axis-aligned boxes inside a room; depth is rendered per pose by
ray/box intersection with z-buffering (the room's interior walls provide
background depth), and each visible object yields a run-length mask plus a
category/confidence prediction, optionally corrupted by the noise spec.
Ground truth stores the surface-shell voxelization of every box at map
resolution, which is what a depth-based reconstruction can actually observe.
Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .frames import (
    CameraIntrinsics,
    GroundTruthInstance,
    GroundTruthScene,
    Pose,
    encode_rle_mask,
    save_ground_truth,
    write_pgm,
)


@dataclass
class SceneObject:
    instance_id: str
    category: str
    box_min: np.ndarray
    box_max: np.ndarray

    def __post_init__(self) -> None:
        self.box_min = np.asarray(self.box_min, dtype=float)
        self.box_max = np.asarray(self.box_max, dtype=float)
        if not np.all(self.box_max > self.box_min):
            raise ValueError(f"degenerate box for {self.instance_id}")


@dataclass
class NoiseSpec:
    mask_dilation_px: int = 0
    depth_sigma: float = 0.0
    misclassification_rate: float = 0.0
    # Targeted corruption: with the given rate, predictions of this instance
    # are relabeled to mislabel_as at mislabel_confidence.
    mislabel_target: str | None = None
    mislabel_as: str | None = None
    confidence: float = 0.9
    mislabel_confidence: float = 0.9


@dataclass
class SyntheticScene:
    room_min: np.ndarray
    room_max: np.ndarray
    objects: list[SceneObject]
    trajectory: list[Pose]
    intrinsics: CameraIntrinsics
    voxel_size: float = 0.02
    noise: NoiseSpec = field(default_factory=NoiseSpec)

    def __post_init__(self) -> None:
        self.room_min = np.asarray(self.room_min, dtype=float)
        self.room_max = np.asarray(self.room_max, dtype=float)
        if not self.trajectory:
            raise ValueError("trajectory must contain at least one pose")
        for scene_object in self.objects:
            inside = np.all(scene_object.box_min >= self.room_min) and np.all(
                scene_object.box_max <= self.room_max
            )
            if not inside:
                raise ValueError(f"object {scene_object.instance_id} outside room bounds")

    @property
    def categories(self) -> list[str]:
        seen: list[str] = []
        for scene_object in self.objects:
            if scene_object.category not in seen:
                seen.append(scene_object.category)
        return seen


def look_at_pose(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose looking from eye toward target, image v axis down."""
    eye = np.asarray(eye, dtype=float)
    forward = np.asarray(target, dtype=float) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=float)
    right = np.cross(forward, up)
    norm = np.linalg.norm(right)
    if norm < 1e-9:  # looking straight along up; pick an arbitrary right
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        norm = np.linalg.norm(right)
    right = right / norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return Pose(rotation=rotation, translation=eye)


def orbit_trajectory(
    center: np.ndarray,
    radius: float,
    height: float,
    frames: int,
    target: np.ndarray | None = None,
) -> list[Pose]:
    """Poses on a circle around center at the given height, all looking inward."""
    center = np.asarray(center, dtype=float)
    target = center if target is None else np.asarray(target, dtype=float)
    poses = []
    for k in range(frames):
        angle = 2.0 * math.pi * k / frames
        eye = center + np.array([radius * math.cos(angle), radius * math.sin(angle), 0.0])
        eye[2] = height
        poses.append(look_at_pose(eye, target))
    return poses


def _pixel_rays(intrinsics: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """World-frame ray directions per pixel, parameterized by camera depth.

    Directions are the rotated camera rays ((u-cx)/fx, (v-cy)/fy, 1), so the
    ray parameter t equals z-depth in the camera frame.
    """
    us = np.arange(intrinsics.width, dtype=float)
    vs = np.arange(intrinsics.height, dtype=float)
    grid_u, grid_v = np.meshgrid(us, vs)
    dirs_cam = np.stack(
        [
            (grid_u - intrinsics.cx) / intrinsics.fx,
            (grid_v - intrinsics.cy) / intrinsics.fy,
            np.ones_like(grid_u),
        ],
        axis=-1,
    )
    dirs_world = dirs_cam @ pose.rotation.T
    return dirs_world, pose.translation


def _ray_box_entry(
    origin: np.ndarray, dirs: np.ndarray, box_min: np.ndarray, box_max: np.ndarray
) -> np.ndarray:
    """Entry depth of each ray into the box; +inf where the ray misses."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_low = (box_min - origin) * inv
        t_high = (box_max - origin) * inv
    t_near = np.nanmax(np.minimum(t_low, t_high), axis=-1)
    t_far = np.nanmin(np.maximum(t_low, t_high), axis=-1)
    entry = np.where((t_near <= t_far) & (t_near > 1e-6), t_near, np.inf)
    return entry


def _ray_box_exit(
    origin: np.ndarray, dirs: np.ndarray, box_min: np.ndarray, box_max: np.ndarray
) -> np.ndarray:
    """Exit depth of each ray out of the box (origin assumed inside)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t_low = (box_min - origin) * inv
        t_high = (box_max - origin) * inv
    t_far = np.nanmin(np.maximum(t_low, t_high), axis=-1)
    return np.where(t_far > 1e-6, t_far, np.inf)


def render_frame(
    scene: SyntheticScene, pose: Pose
) -> tuple[np.ndarray, np.ndarray]:
    """Render z-depth (meters) and per-pixel winning object index (-1 = room)."""
    dirs, origin = _pixel_rays(scene.intrinsics, pose)
    depth = _ray_box_exit(origin, dirs, scene.room_min, scene.room_max)
    owner = np.full(depth.shape, -1, dtype=int)
    for index, scene_object in enumerate(scene.objects):
        entry = _ray_box_entry(origin, dirs, scene_object.box_min, scene_object.box_max)
        closer = entry < depth
        depth = np.where(closer, entry, depth)
        owner = np.where(closer, index, owner)
    return depth, owner


def voxelize_box_shell(
    box_min: np.ndarray, box_max: np.ndarray, voxel_size: float
) -> set[tuple[int, int, int]]:
    """Voxel keys overlapping the box surface (not its open interior).

    A key is included when its cube touches the closed box but is not
    strictly inside it, matching what surface observations can register.
    """
    lo = np.floor(np.asarray(box_min, dtype=float) / voxel_size).astype(int)
    hi = np.floor(np.asarray(box_max, dtype=float) / voxel_size).astype(int)
    shell = set()
    for i in range(lo[0], hi[0] + 1):
        for j in range(lo[1], hi[1] + 1):
            for k in range(lo[2], hi[2] + 1):
                cube_min = np.array([i, j, k], dtype=float) * voxel_size
                cube_max = cube_min + voxel_size
                interior = np.all(cube_min > box_min) and np.all(cube_max < box_max)
                if not interior:
                    shell.add((i, j, k))
    return shell


def ground_truth_scene(scene: SyntheticScene) -> GroundTruthScene:
    instances = [
        GroundTruthInstance(
            id=scene_object.instance_id,
            category=scene_object.category,
            voxels=voxelize_box_shell(scene_object.box_min, scene_object.box_max, scene.voxel_size),
        )
        for scene_object in scene.objects
    ]
    return GroundTruthScene(voxel_size=scene.voxel_size, instances=instances)


def generate_synthetic(scene: SyntheticScene, seed: int, out_dir: Path | str) -> Path:
    """Write a full dataset directory; byte-identical for a fixed seed."""
    out_dir = Path(out_dir)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    (out_dir / "predictions").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    intrinsics = scene.intrinsics
    noise = scene.noise
    categories = scene.categories
    manifest_lines = []

    for frame_id, pose in enumerate(scene.trajectory):
        depth_m, owner = render_frame(scene, pose)
        if noise.depth_sigma > 0:
            jitter = rng.normal(0.0, noise.depth_sigma, depth_m.shape)
            depth_m = np.where(np.isfinite(depth_m), depth_m + jitter, depth_m)
        raw = np.where(
            np.isfinite(depth_m) & (depth_m > 0),
            np.clip(np.round(depth_m / intrinsics.depth_scale), 0, 65535),
            0,
        ).astype(np.uint16)
        depth_name = f"depth/{frame_id:05d}.pgm"
        write_pgm(out_dir / depth_name, raw)

        instances = []
        for index, scene_object in enumerate(scene.objects):
            mask = owner == index
            if noise.mask_dilation_px > 0 and mask.any():
                mask = ndimage.binary_dilation(mask, iterations=noise.mask_dilation_px)
            if not mask.any():
                continue
            category = scene_object.category
            confidence = noise.confidence
            if (
                noise.mislabel_target == scene_object.instance_id
                and noise.mislabel_as is not None
                and rng.random() < noise.misclassification_rate
            ):
                category = noise.mislabel_as
                confidence = noise.mislabel_confidence
            elif noise.mislabel_target is None and noise.misclassification_rate > 0:
                if rng.random() < noise.misclassification_rate:
                    others = [c for c in categories if c != scene_object.category]
                    if others:
                        category = others[int(rng.integers(len(others)))]
                        confidence = noise.mislabel_confidence
            instances.append(
                {
                    "category": category,
                    "confidence": confidence,
                    "rle": encode_rle_mask(mask),
                }
            )
        predictions_name = f"predictions/{frame_id:05d}.json"
        (out_dir / predictions_name).write_text(
            json.dumps({"instances": instances}, sort_keys=True), encoding="utf-8"
        )

        manifest_lines.append(
            json.dumps(
                {
                    "frame_id": frame_id,
                    "depth": depth_name,
                    "predictions": predictions_name,
                    "pose": {
                        "rotation": [float(x) for x in pose.rotation.ravel()],
                        "translation": [float(x) for x in pose.translation],
                    },
                    "intrinsics": {
                        "fx": intrinsics.fx,
                        "fy": intrinsics.fy,
                        "cx": intrinsics.cx,
                        "cy": intrinsics.cy,
                        "width": intrinsics.width,
                        "height": intrinsics.height,
                        "depth_scale": intrinsics.depth_scale,
                    },
                },
                sort_keys=True,
            )
        )

    (out_dir / "manifest.jsonl").write_text("\n".join(manifest_lines) + "\n", encoding="utf-8")
    save_ground_truth(out_dir / "ground_truth.json", ground_truth_scene(scene))
    return out_dir


def scene_from_spec(obj: dict) -> SyntheticScene:
    """Build a scene from its JSON description.

    The trajectory is either an explicit pose list or an orbit shorthand
    ``{"orbit": {"center", "radius", "height", "frames", "target"?}}``.
    """
    intrinsics = CameraIntrinsics(
        fx=float(obj["intrinsics"]["fx"]),
        fy=float(obj["intrinsics"]["fy"]),
        cx=float(obj["intrinsics"]["cx"]),
        cy=float(obj["intrinsics"]["cy"]),
        width=int(obj["intrinsics"]["width"]),
        height=int(obj["intrinsics"]["height"]),
        depth_scale=float(obj["intrinsics"]["depth_scale"]),
    )
    trajectory_spec = obj["trajectory"]
    if isinstance(trajectory_spec, dict) and "orbit" in trajectory_spec:
        orbit = trajectory_spec["orbit"]
        trajectory = orbit_trajectory(
            center=np.array(orbit["center"], dtype=float),
            radius=float(orbit["radius"]),
            height=float(orbit["height"]),
            frames=int(orbit["frames"]),
            target=np.array(orbit["target"], dtype=float) if "target" in orbit else None,
        )
    else:
        trajectory = [
            Pose(
                rotation=np.array(p["rotation"], dtype=float).reshape(3, 3),
                translation=np.array(p["translation"], dtype=float),
            )
            for p in trajectory_spec
        ]
    noise_spec = obj.get("noise", {})
    noise = NoiseSpec(
        mask_dilation_px=int(noise_spec.get("mask_dilation_px", 0)),
        depth_sigma=float(noise_spec.get("depth_sigma", 0.0)),
        misclassification_rate=float(noise_spec.get("misclassification_rate", 0.0)),
        mislabel_target=noise_spec.get("mislabel_target"),
        mislabel_as=noise_spec.get("mislabel_as"),
        confidence=float(noise_spec.get("confidence", 0.9)),
        mislabel_confidence=float(noise_spec.get("mislabel_confidence", 0.9)),
    )
    return SyntheticScene(
        room_min=np.array(obj["room"]["min"], dtype=float),
        room_max=np.array(obj["room"]["max"], dtype=float),
        objects=[
            SceneObject(
                instance_id=str(o["id"]),
                category=str(o["category"]),
                box_min=np.array(o["min"], dtype=float),
                box_max=np.array(o["max"], dtype=float),
            )
            for o in obj["objects"]
        ],
        trajectory=trajectory,
        intrinsics=intrinsics,
        voxel_size=float(obj.get("voxel_size", 0.02)),
        noise=noise,
    )


def load_scene_spec(path: Path | str) -> SyntheticScene:
    return scene_from_spec(json.loads(Path(path).read_text(encoding="utf-8")))
