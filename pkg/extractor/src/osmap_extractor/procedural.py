"""Deterministic model-free backend: color-keyed detection, seeded embeddings.

Meant for fixtures, tests and offline smoke runs. Objects are recognized by
their palette color, boxes come from connected components, masks from the
component pixels, and embeddings from a fixed random projection of a resized
crop, which makes repeated views of the same surface embed almost
identically while different colors land far apart. Everything is a pure
function of the pixels, so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .backends import GroundedBox, ModelBundle
from .config import ExtractorConfig

# Palette label -> RGB. Fixture scenes draw objects in exactly these colors;
# the matcher tolerates +-DELTA per channel.
PALETTE: dict[str, tuple[int, int, int]] = {
    "chair": (200, 40, 40),
    "table": (220, 200, 40),
    "plant": (40, 180, 60),
    "crate": (50, 70, 200),
    "monitor": (180, 50, 190),
    "wheelchair": (40, 200, 200),
    "floor": (110, 80, 50),
}
_COLOR_DELTA = 30
_MIN_TAG_PIXELS = 50
_CROP_SIDE = 16
_FEATURE_DIM = _CROP_SIDE * _CROP_SIDE * 3


def _color_mask(rgb: np.ndarray, color: tuple[int, int, int]) -> np.ndarray:
    diff = np.abs(rgb.astype(np.int16) - np.asarray(color, dtype=np.int16))
    return (diff <= _COLOR_DELTA).all(axis=-1)


@dataclass(frozen=True)
class ProceduralTagger:
    def tag(self, rgb: np.ndarray) -> list[str]:
        labels = []
        for label, color in PALETTE.items():
            if int(_color_mask(rgb, color).sum()) >= _MIN_TAG_PIXELS:
                labels.append(label)
        return labels


@dataclass(frozen=True)
class ProceduralGrounder:
    def ground(self, rgb: np.ndarray, labels: list[str]) -> list[GroundedBox]:
        boxes = []
        for label in labels:
            color = PALETTE.get(label.casefold())
            if color is None:
                continue  # unknown to this backend; yields no boxes
            components, count = ndimage.label(_color_mask(rgb, color))
            for component in range(1, count + 1):
                rows, cols = np.nonzero(components == component)
                if rows.size < _MIN_TAG_PIXELS:
                    continue
                # raw logit grows with apparent size; squashing happens later
                logit = float(np.log(rows.size / 100.0))
                boxes.append(GroundedBox(
                    label=label, x0=float(cols.min()), y0=float(rows.min()),
                    x1=float(cols.max() + 1), y1=float(rows.max() + 1),
                    logit=logit))
        return boxes


@dataclass(frozen=True)
class ProceduralSegmenter:
    def segment(self, rgb: np.ndarray, boxes: list[GroundedBox]) -> list[np.ndarray]:
        masks = []
        for box in boxes:
            mask = np.zeros(rgb.shape[:2], dtype=bool)
            r0, r1 = int(box.y0), int(np.ceil(box.y1))
            c0, c1 = int(box.x0), int(np.ceil(box.x1))
            color = PALETTE.get(box.label.casefold())
            if color is not None:
                window = _color_mask(rgb[r0:r1, c0:c1], color)
                mask[r0:r1, c0:c1] = window
            masks.append(mask)
        return masks


def _crop_features(rgb: np.ndarray, box: GroundedBox) -> np.ndarray:
    r0, r1 = int(box.y0), max(int(np.ceil(box.y1)), int(box.y0) + 1)
    c0, c1 = int(box.x0), max(int(np.ceil(box.x1)), int(box.x0) + 1)
    crop = Image.fromarray(rgb[r0:r1, c0:c1]).resize((_CROP_SIDE, _CROP_SIDE),
                                                     Image.BILINEAR)
    features = np.asarray(crop, dtype=np.float64).reshape(-1) / 255.0
    return features - features.mean()


def _projection(dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.standard_normal((dim, _FEATURE_DIM)) / np.sqrt(_FEATURE_DIM)


def _embed_features(features: np.ndarray, projection: np.ndarray) -> np.ndarray:
    vec = projection @ features
    norm = np.linalg.norm(vec)
    if norm < 1e-12:  # featureless crop (uniform gray); pin a direction
        vec = projection[:, 0].copy()
        norm = np.linalg.norm(vec)
    return vec / norm


@dataclass(frozen=True)
class ProceduralCropEmbedder:
    d_clip: int
    d_dino: int

    def embed(self, rgb: np.ndarray,
              boxes: list[GroundedBox]) -> tuple[np.ndarray, np.ndarray]:
        clip_proj = _projection(self.d_clip, 9001)
        dino_proj = _projection(self.d_dino, 9002)
        clips, dinos = [], []
        for box in boxes:
            features = _crop_features(rgb, box)
            clips.append(_embed_features(features, clip_proj))
            dinos.append(_embed_features(features, dino_proj))
        if not boxes:
            return (np.empty((0, self.d_clip)), np.empty((0, self.d_dino)))
        return np.vstack(clips), np.vstack(dinos)


@dataclass(frozen=True)
class ProceduralTextEmbedder:
    d_clip: int

    def embed_text(self, text: str) -> np.ndarray:
        folded = text.casefold()
        for label, color in PALETTE.items():
            if label in folded:
                # same pipeline as image crops: a solid patch of the label's
                # color, so text lands next to that label's crop embeddings
                patch = np.full((_CROP_SIDE, _CROP_SIDE, 3), color, dtype=np.uint8)
                features = patch.astype(np.float64).reshape(-1) / 255.0
                return _embed_features(features - features.mean(),
                                       _projection(self.d_clip, 9001))
        digest = hashlib.sha256(folded.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(self.d_clip)
        return vec / np.linalg.norm(vec)


def build_bundle(config: ExtractorConfig) -> ModelBundle:
    return ModelBundle(
        tagger=ProceduralTagger(),
        grounder=ProceduralGrounder(),
        segmenter=ProceduralSegmenter(),
        embedder=ProceduralCropEmbedder(d_clip=config.d_clip, d_dino=config.d_dino),
        text_embedder=ProceduralTextEmbedder(d_clip=config.d_clip),
    )
