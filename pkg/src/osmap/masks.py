"""Run-length codec for instance segmentation masks.

Masks are encoded over row-major pixel order as alternating run lengths,
background first (the leading background run may be 0). A valid mask covers
the full image (runs sum to width*height) and has at least one foreground
pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SchemaError


@dataclass(frozen=True)
class InstanceMask:
    """RLE-encoded binary mask for one detection."""

    width: int
    height: int
    runs: tuple[int, ...]

    @property
    def foreground_count(self) -> int:
        return int(sum(self.runs[1::2]))


def validate_mask(mask: InstanceMask, *, frame_id: int | None = None, field: str = "mask") -> None:
    """Raise SchemaError unless *mask* satisfies the codec invariants."""
    if mask.width <= 0 or mask.height <= 0:
        raise SchemaError("non-positive mask dimensions", frame_id=frame_id, field=field)
    if any((not isinstance(r, (int, np.integer))) or r < 0 for r in mask.runs):
        raise SchemaError("runs must be non-negative integers", frame_id=frame_id, field=field)
    total = int(sum(mask.runs))
    expected = mask.width * mask.height
    if total != expected:
        raise SchemaError(
            f"mask length mismatch: runs sum to {total}, expected {expected}",
            frame_id=frame_id,
            field=field,
        )
    if mask.foreground_count == 0:
        raise SchemaError("mask has no foreground pixels", frame_id=frame_id, field=field)


def decode_mask(mask: InstanceMask) -> np.ndarray:
    """Return the foreground pixel indices (row-major, ascending int64)."""
    runs = np.asarray(mask.runs, dtype=np.int64)
    ends = np.cumsum(runs)
    starts = ends - runs
    pieces = [np.arange(s, e, dtype=np.int64) for s, e in zip(starts[1::2], ends[1::2])]
    if not pieces:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(pieces)


def encode_mask(pixels: np.ndarray, width: int, height: int) -> InstanceMask:
    """Encode a set of row-major foreground pixel indices.

    The result is canonical: background run first (possibly 0), every later
    run positive, no trailing zero run.
    """
    pixels = np.unique(np.asarray(pixels, dtype=np.int64))
    if pixels.size == 0:
        raise SchemaError("cannot encode an empty mask")
    if pixels[0] < 0 or pixels[-1] >= width * height:
        raise SchemaError("pixel index out of image bounds")
    flat = np.zeros(width * height, dtype=bool)
    flat[pixels] = True
    # Boundaries where the value changes, bracketed by the image edges.
    changes = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], changes, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return InstanceMask(width=width, height=height, runs=tuple(int(r) for r in runs))


def mask_to_bitmap(mask: InstanceMask) -> np.ndarray:
    """Decode to a (height, width) boolean bitmap."""
    flat = np.zeros(mask.width * mask.height, dtype=bool)
    flat[decode_mask(mask)] = True
    return flat.reshape(mask.height, mask.width)
