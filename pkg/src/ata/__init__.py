"""Alignment-guided temporal attention toolkit."""

from . import alignment, infotheory, matching, model, numerics, synthdata

__all__ = ["alignment", "infotheory", "matching", "model", "numerics", "synthdata"]
__version__ = "0.1.0"
