"""Saliency-grounded GRPO for a toy vision-language model, in numpy."""

__version__ = "0.1.0"
