"""The extraction cascade: tag, ground, segment, embed, emit.

Direct op calls raise on backend failures (with the image path when known);
sequence emission applies a per-image skip-and-log policy so one bad frame
cannot abort a long batch.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import schema
from .backends import GroundedBox, ModelBundle, load_bundle
from .config import ExtractorConfig
from .errors import BackendError, InputError

logger = logging.getLogger(__name__)

_UNIT_NORM_TOLERANCE = 1e-4


def logistic(x: float) -> float:
    return float(1.0 / (1.0 + np.exp(-x)))


@dataclass
class DetectionPayload:
    """One detection ready for serialization; confidence already in [0,1]."""

    label: str
    bbox: tuple[float, float, float, float]
    confidence: float
    mask: np.ndarray
    clip_embedding: np.ndarray | None = None
    dino_embedding: np.ndarray | None = None


def tag_image(rgb: np.ndarray, bundle: ModelBundle,
              config: ExtractorConfig) -> list[str]:
    """Tag, drop blocklisted labels (case-folded), append requested extras."""
    try:
        raw = bundle.tagger.tag(rgb)
    except Exception as exc:
        raise BackendError(f"tagging failed: {exc}") from exc
    blocked = {label.casefold() for label in config.blocklist}
    labels = [label for label in raw if label.casefold() not in blocked]
    for extra in config.extra_labels:
        if extra.casefold() not in {l.casefold() for l in labels}:
            labels.append(extra)
    return labels


def _clip_box(box: GroundedBox, width: int, height: int) -> GroundedBox | None:
    x0 = min(max(box.x0, 0.0), width)
    y0 = min(max(box.y0, 0.0), height)
    x1 = min(max(box.x1, 0.0), width)
    y1 = min(max(box.y1, 0.0), height)
    if x1 - x0 < 1.0 or y1 - y0 < 1.0:
        return None
    return GroundedBox(label=box.label, x0=x0, y0=y0, x1=x1, y1=y1, logit=box.logit)


def detect_and_segment(rgb: np.ndarray, labels: list[str], bundle: ModelBundle,
                       config: ExtractorConfig) -> list[DetectionPayload]:
    """Grounded boxes above the confidence threshold, each with its mask.

    Degenerate boxes and empty/under-sized masks are dropped with a log
    entry rather than failing the frame.
    """
    if not labels:
        return []
    height, width = rgb.shape[:2]
    try:
        raw_boxes = bundle.grounder.ground(rgb, labels)
    except Exception as exc:
        raise BackendError(f"grounding failed: {exc}") from exc
    boxes = []
    for box in raw_boxes:
        clipped = _clip_box(box, width, height)
        if clipped is None:
            logger.warning("dropping degenerate box for label %r: %s",
                           box.label, (box.x0, box.y0, box.x1, box.y1))
            continue
        if logistic(clipped.logit) < config.box_threshold:
            continue
        boxes.append(clipped)
    if not boxes:
        return []
    try:
        masks = bundle.segmenter.segment(rgb, boxes)
    except Exception as exc:
        raise BackendError(f"segmentation failed: {exc}") from exc
    payloads = []
    for box, mask in zip(boxes, masks):
        pixels = int(np.count_nonzero(mask))
        if pixels < config.min_mask_pixels:
            logger.warning("dropping %r box with %d mask pixels", box.label, pixels)
            continue
        payloads.append(DetectionPayload(
            label=box.label, bbox=(box.x0, box.y0, box.x1, box.y1),
            confidence=logistic(box.logit), mask=mask))
    return payloads


def embed_crops(rgb: np.ndarray, payloads: list[DetectionPayload],
                bundle: ModelBundle) -> list[DetectionPayload]:
    """Attach unit-norm clip/dino embeddings to every payload."""
    boxes = [GroundedBox(label=p.label, x0=p.bbox[0], y0=p.bbox[1],
                         x1=p.bbox[2], y1=p.bbox[3], logit=0.0) for p in payloads]
    try:
        clips, dinos = bundle.embedder.embed(rgb, boxes)
    except Exception as exc:
        raise BackendError(f"crop embedding failed: {exc}") from exc
    for payload, clip_vec, dino_vec in zip(payloads, clips, dinos):
        for vec in (clip_vec, dino_vec):
            if abs(np.linalg.norm(vec) - 1.0) > _UNIT_NORM_TOLERANCE:
                raise BackendError("embedder returned a non-unit vector")
        payload.clip_embedding = clip_vec
        payload.dino_embedding = dino_vec
    return payloads


def embed_text(text: str, bundle: ModelBundle, instance_rank: int = 1) -> dict:
    """Query JSON for the mapping engine's query CLI."""
    if not text.strip():
        raise InputError("query text must not be empty")
    if instance_rank < 1:
        raise InputError("instance_rank must be at least 1")
    try:
        vec = bundle.text_embedder.embed_text(text)
    except Exception as exc:
        raise BackendError(f"text embedding failed: {exc}") from exc
    if abs(np.linalg.norm(vec) - 1.0) > _UNIT_NORM_TOLERANCE:
        raise BackendError("text embedder returned a non-unit vector")
    return {"text": text, "embedding": [float(v) for v in vec],
            "instance_rank": instance_rank}


# --------------------------------------------------------------- sequences


def _read_intrinsics(directory: Path) -> dict:
    path = directory / "intrinsics.json"
    if not path.is_file():
        raise InputError(f"intrinsics file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON: {exc}") from exc
    missing = {"fx", "fy", "cx", "cy"} - set(data)
    if missing:
        raise InputError(f"{path}: missing keys {sorted(missing)}")
    return data


def _read_poses(path: Path) -> list[tuple[int, list[float], list[float]]]:
    if not path.is_file():
        raise InputError(f"poses file not found: {path}")
    poses = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise InputError(f"{path}:{lineno}: expected "
                             "'frame_id tx ty tz qw qx qy qz'")
        poses.append((int(parts[0]),
                      [float(v) for v in parts[1:4]],
                      [float(v) for v in parts[4:8]]))
    return poses


def _load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def _load_depth(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise InputError(f"{path}: depth must be single-channel")
    if arr.min() < 0 or arr.max() > 0xFFFF:
        raise InputError(f"{path}: depth exceeds 16-bit range")
    return arr.astype(np.uint16)


def emit_sequence(input_dir: str | Path, output_path: str | Path,
                  config: ExtractorConfig, bundle: ModelBundle | None = None) -> dict:
    """Run the cascade over a posed RGB-D directory and write a frames file.

    Layout: rgb_NNNN.png/jpg + depth_NNNN.png pairs, poses.txt (per line:
    frame_id tx ty tz qw qx qy qz) and intrinsics.json. Image/pose counts
    must line up; per-image inference failures are logged and emit a frame
    with zero detections.
    """
    input_dir = Path(input_dir)
    if not input_dir.is_dir():
        raise InputError(f"input directory not found: {input_dir}")
    bundle = bundle or load_bundle(config)
    intrinsics = _read_intrinsics(input_dir)
    poses = _read_poses(input_dir / "poses.txt")
    rgb_paths = sorted(p for p in input_dir.iterdir()
                       if p.suffix.lower() in (".png", ".jpg", ".jpeg")
                       and p.stem.startswith("rgb_"))
    if len(rgb_paths) != len(poses):
        raise InputError(
            f"{input_dir / 'poses.txt'}: {len(poses)} poses for "
            f"{len(rgb_paths)} rgb images")
    lines = []
    detections_total = 0
    for (frame_id, translation, rotation), rgb_path in zip(poses, rgb_paths):
        depth_path = input_dir / f"depth_{rgb_path.stem.split('_', 1)[1]}.png"
        if not depth_path.is_file():
            raise InputError(f"depth image not found: {depth_path}")
        rgb = _load_rgb(rgb_path)
        depth = _load_depth(depth_path)
        if depth.shape != rgb.shape[:2]:
            raise InputError(f"{depth_path}: depth size {depth.shape} does not "
                             f"match rgb {rgb.shape[:2]}")
        try:
            labels = tag_image(rgb, bundle, config)
            payloads = detect_and_segment(rgb, labels, bundle, config)
            payloads = embed_crops(rgb, payloads, bundle)
        except BackendError as exc:
            logger.warning("%s: %s; emitting frame without detections",
                           rgb_path, exc)
            payloads = []
        detections = [schema.detection_dict(p.label, p.bbox, p.confidence, p.mask,
                                            p.clip_embedding, p.dino_embedding)
                      for p in payloads]
        detections_total += len(detections)
        lines.append(schema.frame_line(frame_id, intrinsics, translation,
                                       rotation, depth, detections))
    schema.write_frames_file(output_path, bundle.embedder.d_clip,
                             bundle.embedder.d_dino, lines)
    return {"frames": len(lines), "detections": detections_total,
            "output": str(output_path)}
