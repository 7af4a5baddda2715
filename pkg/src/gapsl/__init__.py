"""Parallel split learning with server-side gradient coordination."""

__version__ = "0.1.0"
