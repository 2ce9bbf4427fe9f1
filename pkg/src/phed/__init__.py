"""Progressively trained hierarchical encoder-decoder with stage-wise CVAE latents."""

__version__ = "0.1.0"

from .numerics import set_precision

set_precision("float64")
