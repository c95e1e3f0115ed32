"""Frame-record extraction from posed RGB-D imagery.

Runs a tag -> ground -> segment -> embed cascade over image sequences and
emits the JSON-lines frame-record files the osmap engine builds maps from.
Backends are pluggable: a deterministic procedural backend for fixtures and
offline testing, and a transformers-based backend when checkpoints are
available.
"""

from .backends import GroundedBox, ModelBundle, load_bundle
from .config import DEFAULT_BLOCKLIST, ExtractorConfig
from .errors import BackendError, BackendUnavailable, ExtractorError, InputError
from .fixtures import make_fixtures
from .pipeline import detect_and_segment, embed_crops, embed_text, emit_sequence, tag_image

__version__ = "0.1.0"
