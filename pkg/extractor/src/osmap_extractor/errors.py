"""Extractor exception hierarchy; the CLI maps these onto exit codes."""

from __future__ import annotations


class ExtractorError(Exception):
    """Base class for extractor failures."""


class InputError(ExtractorError):
    """Input images, depth maps, poses or configs are missing or malformed."""


class BackendError(ExtractorError):
    """A model backend failed during inference."""


class BackendUnavailable(ExtractorError):
    """The requested backend cannot be constructed in this environment."""
