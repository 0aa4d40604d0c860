"""Mask-based saliency with completeness/soundness evaluation on synthetic shapes."""

__version__ = "0.1.0"
