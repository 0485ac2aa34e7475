"""Exception hierarchy shared across the package.

Two top-level families matter for callers: ``InputError`` for bad
user-supplied data (CLI exit code 1) and ``ContractViolation`` for internal
API misuse (CLI exit code 2).
"""

from __future__ import annotations


class SpecSparseError(Exception):
    """Base class for all package errors."""


class InputError(SpecSparseError):
    """User-supplied input (tokens, files, configs) is invalid."""


class ContractViolation(SpecSparseError):
    """An internal precondition was violated; indicates a caller bug."""


class CapacityError(InputError):
    """A sequence or cache would exceed its configured capacity."""


class ConfigError(InputError):
    """A configuration object is inconsistent or infeasible."""


class TraceLoadError(InputError):
    """A persisted trace set cannot be loaded."""


class VersionMismatchError(TraceLoadError):
    """The on-disk format version is not supported by this build."""


class BlobSizeError(TraceLoadError):
    """A data blob is missing bytes or disagrees with its manifest entry."""


class ChecksumError(TraceLoadError):
    """A data blob fails its manifest checksum."""
