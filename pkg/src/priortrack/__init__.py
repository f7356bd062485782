"""Monocular tracking of a rigid organ against its pre-operative mesh."""

__version__ = "0.1.0"
