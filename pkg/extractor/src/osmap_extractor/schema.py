"""Writer side of the frame-record wire format consumed by the osmap engine.

This package talks to the mapping engine exclusively through files, so the
schema is implemented here independently rather than imported. Format:
JSON lines; line 1 is a header declaring embedding dimensions, every later
line is one frame. Masks are run-length encodings over row-major pixels
(background first, runs summing to width*height); depth is inline base64 of
row-major little-endian uint16 millimeters.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path
from typing import Iterable

import numpy as np

SCHEMA_VERSION = 1  # must match the engine's expected version


def encode_rle(mask: np.ndarray) -> list[int]:
    """Run-length encode a boolean (H, W) mask, background run first."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if not flat.any():
        raise ValueError("cannot encode an empty mask")
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs = [0] + runs
    return [int(r) for r in runs]


def header_line(d_clip: int, d_dino: int) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, "d_clip": d_clip,
                       "d_dino": d_dino, "depth_unit": "mm"},
                      sort_keys=True, separators=(",", ":"))


def detection_dict(label: str, bbox: tuple[float, float, float, float],
                   confidence: float, mask: np.ndarray,
                   clip_embedding: np.ndarray, dino_embedding: np.ndarray) -> dict:
    height, width = mask.shape
    return {
        "label": label,
        "bbox": [float(v) for v in bbox],
        "confidence": float(confidence),
        "mask": {"width": int(width), "height": int(height),
                 "runs": encode_rle(mask)},
        "clip_embedding": [float(v) for v in clip_embedding],
        "dino_embedding": [float(v) for v in dino_embedding],
    }


def frame_line(frame_id: int, intrinsics: dict, translation, rotation_wxyz,
               depth_mm: np.ndarray, detections: list[dict]) -> str:
    depth_mm = np.asarray(depth_mm, dtype=np.uint16)
    height, width = depth_mm.shape
    record = {
        "frame_id": int(frame_id),
        "intrinsics": {
            "fx": float(intrinsics["fx"]), "fy": float(intrinsics["fy"]),
            "cx": float(intrinsics["cx"]), "cy": float(intrinsics["cy"]),
            "width": int(width), "height": int(height),
        },
        "pose": {
            "translation": [float(v) for v in translation],
            "rotation": [float(v) for v in rotation_wxyz],
        },
        "depth": {
            "width": int(width), "height": int(height),
            "values_b64": base64.b64encode(depth_mm.astype("<u2").tobytes()).decode("ascii"),
        },
        "detections": detections,
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_frames_file(path: str | Path, d_clip: int, d_dino: int,
                      frame_lines: Iterable[str]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(header_line(d_clip, d_dino) + "\n")
        for line in frame_lines:
            handle.write(line + "\n")
