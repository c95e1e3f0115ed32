"""Backend protocols for the extraction cascade and the bundle factory.

A bundle provides five capabilities: image tagging, text-grounded box
detection, box-prompted segmentation, crop embedding (two spaces) and text
embedding. Implementations are swappable; everything downstream only sees
these protocols.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .config import ExtractorConfig
from .errors import BackendUnavailable


@dataclass(frozen=True)
class GroundedBox:
    """One grounded detection before segmentation; score is a raw logit."""

    label: str
    x0: float
    y0: float
    x1: float
    y1: float
    logit: float


@runtime_checkable
class Tagger(Protocol):
    def tag(self, rgb: np.ndarray) -> list[str]:
        """Labels describing the image content, most salient first."""
        ...


@runtime_checkable
class Grounder(Protocol):
    def ground(self, rgb: np.ndarray, labels: list[str]) -> list[GroundedBox]:
        """Boxes for every label occurrence found in the image."""
        ...


@runtime_checkable
class Segmenter(Protocol):
    def segment(self, rgb: np.ndarray, boxes: list[GroundedBox]) -> list[np.ndarray]:
        """One boolean (H, W) mask per input box."""
        ...


@runtime_checkable
class CropEmbedder(Protocol):
    d_clip: int
    d_dino: int

    def embed(self, rgb: np.ndarray,
              boxes: list[GroundedBox]) -> tuple[np.ndarray, np.ndarray]:
        """Unit-norm (N, d_clip) and (N, d_dino) embeddings of the box crops."""
        ...


@runtime_checkable
class TextEmbedder(Protocol):
    d_clip: int

    def embed_text(self, text: str) -> np.ndarray:
        """Unit-norm vector in the same space as the crop clip embeddings."""
        ...


@dataclass(frozen=True)
class ModelBundle:
    tagger: Tagger
    grounder: Grounder
    segmenter: Segmenter
    embedder: CropEmbedder
    text_embedder: TextEmbedder


def load_bundle(config: ExtractorConfig) -> ModelBundle:
    """Construct the bundle selected by config.backend."""
    if config.backend == "procedural":
        from . import procedural
        return procedural.build_bundle(config)
    if config.backend == "transformers":
        from . import hf
        return hf.build_bundle(config)
    raise BackendUnavailable(f"no such backend: {config.backend}")
