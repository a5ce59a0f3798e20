"""Mask prediction and attention-enhanced blended DDIM editing."""

__version__ = "0.1.0"
