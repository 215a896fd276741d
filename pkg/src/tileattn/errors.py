"""Exception types shared by the kernels, the harness and the CLI."""

from __future__ import annotations


class TileAttnError(Exception):
    """Base class for errors raised by this package."""


class UnsupportedScheduleError(TileAttnError):
    """A tile schedule (or method) cannot run for the requested problem."""

    status = "unsupported"


class ResourceError(TileAttnError):
    """A kernel could not obtain the memory it needs."""

    status = "oom"


class ConfigError(TileAttnError, ValueError):
    """Invalid grid or CLI configuration."""


class RecordFormatError(TileAttnError, ValueError):
    """A benchmark CSV could not be parsed."""
