"""Frame-record format: posed RGB-D frames plus per-detection semantics.

A sequence is a JSON-lines file. Line 1 is a header::

    {"schema_version": 1, "d_clip": D, "d_dino": D, "depth_unit": "mm"}

Every following line is one frame record::

    {"frame_id": 0,
     "intrinsics": {"fx","fy","cx","cy","width","height"},
     "pose": {"translation": [x,y,z], "rotation": [w,x,y,z]},
     "depth": {"width","height","values_b64": ...}       # raw uint16 LE, or
              {"width","height","png_path": "rel.png"},  # 16-bit gray PNG, mm
     "detections": [{"label", "bbox": [x0,y0,x1,y1], "confidence",
                     "mask": {"width","height","runs"},
                     "clip_embedding": [...], "dino_embedding": [...]}]}

Depths are millimeters with 0 meaning invalid. Embeddings are renormalized
to unit L2 norm during ingest; frame ids must be strictly increasing.

Parsing a record is pure given the header, so records may be parsed in
parallel once the header line has been read.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from .errors import SchemaError
from .masks import InstanceMask, validate_mask

SCHEMA_VERSION = 1

# Tags treated as scene background rather than queryable objects.
DEFAULT_BACKGROUND_LABELS = frozenset({"wall", "floor", "ceiling", "office"})

# Embeddings with a norm below this cannot be meaningfully renormalized.
_MIN_EMBED_NORM = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform; rotation is a unit quaternion (w,x,y,z)."""

    translation: np.ndarray
    rotation: np.ndarray


@dataclass(frozen=True)
class DepthImage:
    """Millimeter depths, row-major uint16, shape (height, width); 0 = invalid."""

    width: int
    height: int
    values: np.ndarray


@dataclass(frozen=True)
class Detection:
    label: str
    bbox: tuple[float, float, float, float]
    confidence: float
    mask: InstanceMask
    clip_embedding: np.ndarray
    dino_embedding: np.ndarray


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    intrinsics: CameraIntrinsics
    pose: Pose
    depth: DepthImage
    detections: list[Detection] = field(default_factory=list)


@dataclass(frozen=True)
class SequenceHeader:
    d_clip: int
    d_dino: int
    schema_version: int = SCHEMA_VERSION
    depth_unit: str = "mm"


def _get(obj: dict, key: str, path: str, frame_id: int | None):
    if not isinstance(obj, dict):
        raise SchemaError(f"expected an object, got {type(obj).__name__}",
                          frame_id=frame_id, field=path)
    if key not in obj:
        raise SchemaError(f"missing field '{key}'", frame_id=frame_id, field=path)
    return obj[key]


def _as_number(value, path: str, frame_id: int | None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError("expected a number", frame_id=frame_id, field=path)
    if not math.isfinite(value):
        raise SchemaError("value is not finite", frame_id=frame_id, field=path)
    return float(value)


def _as_int(value, path: str, frame_id: int | None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SchemaError("expected an integer", frame_id=frame_id, field=path)
    return value


def parse_header(line: str) -> SequenceHeader:
    """Parse and validate the sequence header line."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"header is not valid JSON: {exc}", field="header") from exc
    version = _as_int(_get(obj, "schema_version", "header.schema_version", None),
                      "header.schema_version", None)
    if version != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema_version {version}", field="header.schema_version")
    d_clip = _as_int(_get(obj, "d_clip", "header.d_clip", None), "header.d_clip", None)
    d_dino = _as_int(_get(obj, "d_dino", "header.d_dino", None), "header.d_dino", None)
    if d_clip < 1 or d_dino < 1:
        raise SchemaError("embedding dimensions must be positive", field="header")
    unit = _get(obj, "depth_unit", "header.depth_unit", None)
    if unit != "mm":
        raise SchemaError(f"unsupported depth_unit {unit!r}", field="header.depth_unit")
    return SequenceHeader(d_clip=d_clip, d_dino=d_dino, schema_version=version, depth_unit="mm")


def _parse_intrinsics(obj, frame_id: int) -> CameraIntrinsics:
    path = "intrinsics"
    fx = _as_number(_get(obj, "fx", path, frame_id), f"{path}.fx", frame_id)
    fy = _as_number(_get(obj, "fy", path, frame_id), f"{path}.fy", frame_id)
    cx = _as_number(_get(obj, "cx", path, frame_id), f"{path}.cx", frame_id)
    cy = _as_number(_get(obj, "cy", path, frame_id), f"{path}.cy", frame_id)
    width = _as_int(_get(obj, "width", path, frame_id), f"{path}.width", frame_id)
    height = _as_int(_get(obj, "height", path, frame_id), f"{path}.height", frame_id)
    if width <= 0 or height <= 0:
        raise SchemaError("image dimensions must be positive", frame_id=frame_id, field=path)
    if fx <= 0 or fy <= 0:
        raise SchemaError("focal lengths must be positive", frame_id=frame_id, field=path)
    if not (0 <= cx < width) or not (0 <= cy < height):
        raise SchemaError("principal point outside image", frame_id=frame_id, field=path)
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height)


def _parse_vector(value, length: int, path: str, frame_id: int | None) -> np.ndarray:
    if not isinstance(value, list) or len(value) != length:
        raise SchemaError(f"expected a list of {length} numbers", frame_id=frame_id, field=path)
    return np.array([_as_number(v, path, frame_id) for v in value], dtype=np.float64)


def _parse_pose(obj, frame_id: int) -> Pose:
    translation = _parse_vector(_get(obj, "translation", "pose", frame_id), 3,
                                "pose.translation", frame_id)
    rotation = _parse_vector(_get(obj, "rotation", "pose", frame_id), 4,
                             "pose.rotation", frame_id)
    norm = float(np.linalg.norm(rotation))
    if abs(norm - 1.0) > 1e-6:
        raise SchemaError(f"quaternion norm {norm:.8f} is not 1", frame_id=frame_id,
                          field="pose.rotation")
    return Pose(translation=translation, rotation=rotation / norm)


def _parse_depth(obj, intrinsics: CameraIntrinsics, frame_id: int,
                 base_dir: Path | None) -> DepthImage:
    path = "depth"
    width = _as_int(_get(obj, "width", path, frame_id), f"{path}.width", frame_id)
    height = _as_int(_get(obj, "height", path, frame_id), f"{path}.height", frame_id)
    if (width, height) != (intrinsics.width, intrinsics.height):
        raise SchemaError("depth size mismatch with intrinsics", frame_id=frame_id, field=path)
    if "values_b64" in obj:
        try:
            raw = base64.b64decode(obj["values_b64"], validate=True)
        except Exception as exc:
            raise SchemaError("invalid base64 depth payload", frame_id=frame_id,
                              field=f"{path}.values_b64") from exc
        values = np.frombuffer(raw, dtype="<u2")
    elif "png_path" in obj:
        if base_dir is None:
            raise SchemaError("depth references a file but no base directory is known",
                              frame_id=frame_id, field=f"{path}.png_path")
        png = base_dir / str(obj["png_path"])
        try:
            with Image.open(png) as img:
                arr = np.asarray(img)
        except FileNotFoundError as exc:
            raise SchemaError(f"depth image not found: {png}", frame_id=frame_id,
                              field=f"{path}.png_path") from exc
        if arr.ndim != 2:
            raise SchemaError("depth PNG must be single-channel", frame_id=frame_id,
                              field=f"{path}.png_path")
        if arr.min() < 0 or arr.max() > 0xFFFF:
            raise SchemaError("depth PNG values exceed 16-bit range", frame_id=frame_id,
                              field=f"{path}.png_path")
        values = arr.astype(np.uint16).reshape(-1)
    else:
        raise SchemaError("depth needs either values_b64 or png_path",
                          frame_id=frame_id, field=path)
    if values.size != width * height:
        raise SchemaError(
            f"depth size mismatch: {values.size} values for {width}x{height}",
            frame_id=frame_id, field=path)
    return DepthImage(width=width, height=height,
                      values=values.reshape(height, width).copy())


def _parse_embedding(value, dim: int, path: str, frame_id: int) -> np.ndarray:
    vec = _parse_vector(value, dim, path, frame_id)
    norm = float(np.linalg.norm(vec))
    if norm < _MIN_EMBED_NORM:
        raise SchemaError("embedding norm too small to normalize", frame_id=frame_id, field=path)
    return vec / norm


def _parse_detection(obj, index: int, intrinsics: CameraIntrinsics,
                     header: SequenceHeader, frame_id: int) -> Detection:
    path = f"detections[{index}]"
    label = _get(obj, "label", path, frame_id)
    if not isinstance(label, str) or not label:
        raise SchemaError("label must be a non-empty string", frame_id=frame_id,
                          field=f"{path}.label")
    bbox_raw = _get(obj, "bbox", path, frame_id)
    bbox = tuple(_parse_vector(bbox_raw, 4, f"{path}.bbox", frame_id))
    x_min, y_min, x_max, y_max = bbox
    if not (0 <= x_min < x_max <= intrinsics.width):
        raise SchemaError("bbox x range invalid", frame_id=frame_id, field=f"{path}.bbox")
    if not (0 <= y_min < y_max <= intrinsics.height):
        raise SchemaError("bbox y range invalid", frame_id=frame_id, field=f"{path}.bbox")
    confidence = _as_number(_get(obj, "confidence", path, frame_id),
                            f"{path}.confidence", frame_id)
    if not (0.0 <= confidence <= 1.0):
        raise SchemaError("confidence outside [0,1]", frame_id=frame_id,
                          field=f"{path}.confidence")
    mask_obj = _get(obj, "mask", path, frame_id)
    runs_raw = _get(mask_obj, "runs", f"{path}.mask", frame_id)
    if not isinstance(runs_raw, list):
        raise SchemaError("runs must be a list", frame_id=frame_id, field=f"{path}.mask.runs")
    mask = InstanceMask(
        width=_as_int(_get(mask_obj, "width", f"{path}.mask", frame_id),
                      f"{path}.mask.width", frame_id),
        height=_as_int(_get(mask_obj, "height", f"{path}.mask", frame_id),
                       f"{path}.mask.height", frame_id),
        runs=tuple(_as_int(r, f"{path}.mask.runs", frame_id) for r in runs_raw),
    )
    if (mask.width, mask.height) != (intrinsics.width, intrinsics.height):
        raise SchemaError("mask size mismatch with intrinsics", frame_id=frame_id,
                          field=f"{path}.mask")
    validate_mask(mask, frame_id=frame_id, field=f"{path}.mask")
    clip = _parse_embedding(_get(obj, "clip_embedding", path, frame_id),
                            header.d_clip, f"{path}.clip_embedding", frame_id)
    dino = _parse_embedding(_get(obj, "dino_embedding", path, frame_id),
                            header.d_dino, f"{path}.dino_embedding", frame_id)
    return Detection(label=label, bbox=bbox, confidence=confidence, mask=mask,
                     clip_embedding=clip, dino_embedding=dino)


def parse_frame_record(line: str | bytes, header: SequenceHeader,
                       base_dir: Path | None = None) -> FrameRecord:
    """Parse one frame-record line, validating every documented invariant.

    *base_dir* resolves relative depth PNG references; records with inline
    depth parse without it.
    """
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"record is not valid JSON: {exc}") from exc
    frame_id = _as_int(_get(obj, "frame_id", "frame_id", None), "frame_id", None)
    intrinsics = _parse_intrinsics(_get(obj, "intrinsics", "intrinsics", frame_id), frame_id)
    pose = _parse_pose(_get(obj, "pose", "pose", frame_id), frame_id)
    depth = _parse_depth(_get(obj, "depth", "depth", frame_id), intrinsics, frame_id, base_dir)
    detections_raw = _get(obj, "detections", "detections", frame_id)
    if not isinstance(detections_raw, list):
        raise SchemaError("detections must be a list", frame_id=frame_id, field="detections")
    detections = [
        _parse_detection(d, i, intrinsics, header, frame_id)
        for i, d in enumerate(detections_raw)
    ]
    return FrameRecord(frame_id=frame_id, intrinsics=intrinsics, pose=pose,
                       depth=depth, detections=detections)


def iter_frames(path: str | Path) -> Iterator[tuple[SequenceHeader, FrameRecord]]:
    """Stream (header, frame) pairs from a JSON-lines sequence file.

    Enforces strictly increasing frame ids so every frame id is unique.
    """
    path = Path(path)
    last_id: int | None = None
    with path.open("r", encoding="utf-8") as handle:
        header_line = handle.readline()
        if not header_line.strip():
            raise SchemaError("empty sequence file", field="header")
        header = parse_header(header_line)
        for line in handle:
            if not line.strip():
                continue
            frame = parse_frame_record(line, header, base_dir=path.parent)
            if last_id is not None and frame.frame_id <= last_id:
                raise SchemaError("frame ids must be strictly increasing",
                                  frame_id=frame.frame_id, field="frame_id")
            last_id = frame.frame_id
            yield header, frame


def read_frames(path: str | Path) -> tuple[SequenceHeader, list[FrameRecord]]:
    """Read a whole sequence file into memory."""
    header: SequenceHeader | None = None
    records: list[FrameRecord] = []
    for header, frame in iter_frames(path):
        records.append(frame)
    if header is None:
        # File contained only the header line; recover it for the caller.
        with Path(path).open("r", encoding="utf-8") as handle:
            header = parse_header(handle.readline())
    return header, records


def header_to_json(header: SequenceHeader) -> str:
    return json.dumps(
        {"schema_version": header.schema_version, "d_clip": header.d_clip,
         "d_dino": header.d_dino, "depth_unit": header.depth_unit},
        sort_keys=True, separators=(",", ":"))


def frame_to_json(frame: FrameRecord) -> str:
    """Serialize a frame with inline base64 depth (little-endian uint16)."""
    depth_bytes = frame.depth.values.astype("<u2").tobytes()
    obj = {
        "frame_id": frame.frame_id,
        "intrinsics": {
            "fx": frame.intrinsics.fx, "fy": frame.intrinsics.fy,
            "cx": frame.intrinsics.cx, "cy": frame.intrinsics.cy,
            "width": frame.intrinsics.width, "height": frame.intrinsics.height,
        },
        "pose": {
            "translation": [float(v) for v in frame.pose.translation],
            "rotation": [float(v) for v in frame.pose.rotation],
        },
        "depth": {
            "width": frame.depth.width, "height": frame.depth.height,
            "values_b64": base64.b64encode(depth_bytes).decode("ascii"),
        },
        "detections": [
            {
                "label": det.label,
                "bbox": [float(v) for v in det.bbox],
                "confidence": det.confidence,
                "mask": {"width": det.mask.width, "height": det.mask.height,
                         "runs": list(det.mask.runs)},
                "clip_embedding": [float(v) for v in det.clip_embedding],
                "dino_embedding": [float(v) for v in det.dino_embedding],
            }
            for det in frame.detections
        ],
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_frames(path: str | Path, header: SequenceHeader,
                 records: Iterable[FrameRecord]) -> None:
    """Write a sequence file with inline depth payloads."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as handle:
        handle.write(header_to_json(header) + "\n")
        for frame in records:
            handle.write(frame_to_json(frame) + "\n")


def filter_background(detections: list[Detection],
                      blocklist: frozenset[str] | set[str] = DEFAULT_BACKGROUND_LABELS,
                      ) -> list[Detection]:
    """Drop detections whose case-folded label is blocklisted, keeping order."""
    blocked = {label.casefold() for label in blocklist}
    return [det for det in detections if det.label.casefold() not in blocked]
