"""Axisymmetric-first solver for a viscous fluid coupled to a clamped Koiter shell."""

from __future__ import annotations

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
