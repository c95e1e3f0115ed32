"""Synthetic posed RGB-D fixture generator.

Renders palette-colored billboard objects over a gray back wall and a brown
floor plane, with laterally translating camera poses, so the emitted frames
are geometrically consistent: back-projecting a mask through the recorded
pose reconstructs the same world-space rectangle in every frame. Used by the
test suite and by `osmap-extract make-fixtures` for demos.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .procedural import PALETTE

WIDTH, HEIGHT = 320, 240
FX = FY = 277.0
CX, CY = (WIDTH - 1) / 2.0, (HEIGHT - 1) / 2.0
WALL_DEPTH_M = 5.0
FLOOR_HEIGHT_M = 0.8  # below the optical axis; image y points down
WALL_COLOR = (128, 128, 128)


@dataclass(frozen=True)
class BillboardObject:
    label: str
    center_x: float
    center_y: float
    depth: float
    width_m: float
    height_m: float


DEFAULT_OBJECTS = (
    BillboardObject("chair", -0.50, 0.25, 2.2, 0.50, 0.50),
    BillboardObject("plant", 0.45, 0.15, 2.8, 0.45, 0.60),
    BillboardObject("crate", 0.00, 0.42, 3.4, 0.60, 0.45),
)


def _render(objects, dx: float) -> tuple[np.ndarray, np.ndarray]:
    """RGB and depth (mm) for a camera translated laterally by dx."""
    uu, vv = np.meshgrid(np.arange(WIDTH, dtype=np.float64),
                         np.arange(HEIGHT, dtype=np.float64))
    depth_m = np.full((HEIGHT, WIDTH), WALL_DEPTH_M)
    rgb = np.empty((HEIGHT, WIDTH, 3), dtype=np.uint8)
    rgb[:] = WALL_COLOR
    # floor: y = FLOOR_HEIGHT_M plane, visible below the horizon
    below = vv > CY + 1.0
    with np.errstate(divide="ignore"):
        floor_z = np.where(below, FLOOR_HEIGHT_M * FY / (vv - CY), np.inf)
    floor_hit = below & (floor_z > 0.3) & (floor_z < depth_m)
    depth_m[floor_hit] = floor_z[floor_hit]
    rgb[floor_hit] = PALETTE["floor"]
    for obj in objects:
        u0 = CX + FX * (obj.center_x - obj.width_m / 2 - dx) / obj.depth
        u1 = CX + FX * (obj.center_x + obj.width_m / 2 - dx) / obj.depth
        v0 = CY + FY * (obj.center_y - obj.height_m / 2) / obj.depth
        v1 = CY + FY * (obj.center_y + obj.height_m / 2) / obj.depth
        hit = (uu >= u0) & (uu <= u1) & (vv >= v0) & (vv <= v1) & (obj.depth < depth_m)
        depth_m[hit] = obj.depth
        rgb[hit] = PALETTE[obj.label]
    return rgb, np.round(depth_m * 1000.0).astype(np.uint16)


def make_fixtures(out_dir: str | Path, n_frames: int = 5, seed: int = 3,
                  step_m: float = 0.15) -> dict:
    """Write rgb/depth pairs, poses.txt, intrinsics.json and scene.json."""
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jitter = rng.uniform(-0.05, 0.05, size=(len(DEFAULT_OBJECTS), 2))
    objects = [
        BillboardObject(obj.label, obj.center_x + float(jitter[i, 0]),
                        obj.center_y, obj.depth + float(jitter[i, 1]),
                        obj.width_m, obj.height_m)
        for i, obj in enumerate(DEFAULT_OBJECTS)
    ]
    pose_lines = []
    for frame_id in range(n_frames):
        dx = (frame_id - (n_frames - 1) / 2.0) * step_m
        rgb, depth_mm = _render(objects, dx)
        Image.fromarray(rgb).save(out_dir / f"rgb_{frame_id:04d}.png")
        Image.fromarray(depth_mm).save(out_dir / f"depth_{frame_id:04d}.png")
        pose_lines.append(f"{frame_id} {dx:.6f} 0.0 0.0 1.0 0.0 0.0 0.0")
    (out_dir / "poses.txt").write_text("\n".join(pose_lines) + "\n", encoding="utf-8")
    (out_dir / "intrinsics.json").write_text(
        json.dumps({"fx": FX, "fy": FY, "cx": CX, "cy": CY}, indent=2) + "\n",
        encoding="utf-8")
    scene = {
        "n_frames": n_frames,
        "objects": [
            {"label": obj.label,
             "center": [obj.center_x, obj.center_y, obj.depth],
             "size": [obj.width_m, obj.height_m]}
            for obj in objects
        ],
    }
    (out_dir / "scene.json").write_text(json.dumps(scene, indent=2) + "\n",
                                        encoding="utf-8")
    return scene
