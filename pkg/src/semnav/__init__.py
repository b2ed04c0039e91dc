"""Grid A* candidates selected by a semantic decision layer, plus a
scenario simulator to exercise the whole loop offline."""

from __future__ import annotations

__version__ = "0.1.0"
