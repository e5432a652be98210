"""Agent-driven fictional world simulation toolkit."""

from __future__ import annotations

__version__ = "0.1.0"
