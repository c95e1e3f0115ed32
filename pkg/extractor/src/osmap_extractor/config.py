"""Extractor configuration."""

from __future__ import annotations

from dataclasses import dataclass

from .errors import InputError

DEFAULT_BLOCKLIST = frozenset({"wall", "floor", "ceiling", "office"})

# Vocabulary for zero-shot tagging when no dedicated tagging model is used.
DEFAULT_TAG_VOCABULARY = (
    "chair", "table", "plant", "monitor", "sofa", "crate", "wheelchair",
    "bottle", "mannequin", "robot", "door", "shelf", "lamp", "wall", "floor",
    "ceiling",
)


@dataclass(frozen=True)
class ExtractorConfig:
    """Model selection and thresholds for the extraction cascade.

    The procedural backend ignores the model identifiers; the transformers
    backend loads them (tagging there is CLIP zero-shot scoring over
    ``tag_vocabulary`` rather than a dedicated tagging network).
    """

    backend: str = "procedural"
    tagger_model: str = "openai/clip-vit-base-patch32"
    grounder_model: str = "IDEA-Research/grounding-dino-tiny"
    segmenter_model: str = "facebook/sam-vit-base"
    clip_model: str = "openai/clip-vit-base-patch32"
    dino_model: str = "facebook/dinov2-small"
    device: str = "cpu"
    box_threshold: float = 0.35
    min_mask_pixels: int = 50
    blocklist: frozenset[str] = DEFAULT_BLOCKLIST
    extra_labels: tuple[str, ...] = ()
    tag_vocabulary: tuple[str, ...] = DEFAULT_TAG_VOCABULARY
    # embedding dimensions for the procedural backend
    d_clip: int = 64
    d_dino: int = 48

    def __post_init__(self):
        if self.backend not in ("procedural", "transformers"):
            raise InputError(f"unknown backend {self.backend!r}")
        if not (0.0 <= self.box_threshold <= 1.0):
            raise InputError("box_threshold must lie in [0,1]")
        if self.min_mask_pixels < 1:
            raise InputError("min_mask_pixels must be at least 1")
        if self.d_clip < 1 or self.d_dino < 1:
            raise InputError("embedding dimensions must be positive")
