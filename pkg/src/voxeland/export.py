"""Point-cloud exports of map layers as ASCII PLY with JSON sidecars.

Entropy layers use a blue (low) to red (high) colormap over [0, H_max],
where H_max is the log of the relevant hypothesis-set size: the instance
registry for the geometric layer, the category registry for the semantic
one.  Instance and semantic maps color voxels by their argmax owner.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .evidence import NoEvidenceError
from .uncertainty import UncertaintyLayer, voxel_category_distribution
from .voxelmap import MapState, VoxelKey


def entropy_color(value: float, h_max: float) -> tuple[int, int, int]:
    """Linear blue-to-red ramp; values are clipped to [0, h_max]."""
    if h_max <= 0:
        t = 0.0
    else:
        t = min(1.0, max(0.0, value / h_max))
    return (int(round(255 * t)), 0, int(round(255 * (1.0 - t))))


def _id_color(index: int) -> tuple[int, int, int]:
    """Deterministic distinct-ish color for a small integer id."""
    hue = (index * 0.61803398875) % 1.0
    sector = hue * 6.0
    x = 1.0 - abs(sector % 2.0 - 1.0)
    r, g, b = [(1, x, 0), (x, 1, 0), (0, 1, x), (0, x, 1), (x, 0, 1), (1, 0, x)][
        int(sector) % 6
    ]
    return (int(64 + 191 * r), int(64 + 191 * g), int(64 + 191 * b))


def write_ply(path: Path | str, points: np.ndarray, colors: np.ndarray) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    for point, color in zip(points, colors):
        lines.append(
            f"{point[0]:.6f} {point[1]:.6f} {point[2]:.6f} {color[0]} {color[1]} {color[2]}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _voxel_centers(keys: list[VoxelKey], voxel_size: float) -> np.ndarray:
    if not keys:
        return np.zeros((0, 3))
    return (np.asarray(keys, dtype=float) + 0.5) * voxel_size


def layer_h_max(state: MapState, kind: str) -> float:
    support = len(state.instances) if kind == "geometric" else len(state.categories)
    return math.log(max(2, support))


def export_entropy_layer(
    state: MapState, layer: UncertaintyLayer, ply_path: Path | str
) -> None:
    """Write the layer as a heat-colored PLY plus a raw-value JSON sidecar."""
    h_max = layer_h_max(state, layer.kind)
    keys = sorted(layer.values)
    centers = _voxel_centers(keys, state.voxel_size)
    colors = np.array([entropy_color(layer.values[k], h_max) for k in keys], dtype=np.uint8)
    write_ply(ply_path, centers, colors.reshape(-1, 3))
    sidecar = {
        "kind": layer.kind,
        "unit": "nats",
        "h_max": h_max,
        "generated_at_frame": layer.generated_at_frame,
        "values": [{"key": list(k), "entropy": layer.values[k]} for k in keys],
    }
    Path(str(ply_path) + ".json").write_text(
        json.dumps(sidecar, sort_keys=True), encoding="utf-8"
    )


def export_instance_map(state: MapState, ply_path: Path | str) -> None:
    """Color each evidence-bearing voxel by its argmax instance."""
    keys = []
    colors = []
    for key in sorted(state.cells):
        cell = state.cells[key]
        if not cell.instance_counts:
            continue
        owner = max(sorted(cell.instance_counts), key=lambda i: cell.instance_counts[i])
        keys.append(key)
        colors.append(_id_color(owner))
    write_ply(ply_path, _voxel_centers(keys, state.voxel_size), np.array(colors, dtype=np.uint8).reshape(-1, 3))


def export_semantic_map(state: MapState, ply_path: Path | str) -> None:
    """Color each evidence-bearing voxel by its argmax mixed category."""
    category_index = {label: i for i, label in enumerate(state.categories)}
    keys = []
    colors = []
    for key in sorted(state.cells):
        cell = state.cells[key]
        if not cell.instance_counts:
            continue
        try:
            dist = voxel_category_distribution(cell, state)
        except NoEvidenceError:
            continue
        label = dist.argmax()
        keys.append(key)
        colors.append(_id_color(category_index.get(str(label), 0)))
    write_ply(ply_path, _voxel_centers(keys, state.voxel_size), np.array(colors, dtype=np.uint8).reshape(-1, 3))
