"""Temporal activity recognition for long videos of ordered workflows."""

__version__ = "0.1.0"
