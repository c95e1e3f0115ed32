"""Exception hierarchy shared across the engine.

The CLI maps these onto process exit codes: schema/data problems exit 2,
everything unexpected exits 3.
"""

from __future__ import annotations


class OsmapError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(OsmapError):
    """A serialized record violates the documented schema or an invariant.

    Carries enough context to point at the offending record: the frame id
    (None for header/stream-level problems) and a dotted field path.
    """

    def __init__(self, message: str, *, frame_id: int | None = None, field: str | None = None):
        self.frame_id = frame_id
        self.field = field
        prefix = ""
        if frame_id is not None:
            prefix += f"frame {frame_id}: "
        if field:
            prefix += f"{field}: "
        super().__init__(prefix + message)


class ParameterError(OsmapError):
    """An operation was called with an out-of-contract argument."""


class StateError(OsmapError):
    """An operation was called in a state it does not permit."""


class QueryError(OsmapError):
    """A query cannot be answered (no instances, bad rank, unreachable goal)."""
