"""Desk-scale laboratory for IJEPA and encoder-conditioned IJEPA."""

__version__ = "0.1.0"
