"""Desk-scale short-form video quality evaluation.

The model, score cleaning and corpus simulator live in separate modules;
import them directly, e.g. ``from ksvqe.subjective import clean``.
"""

__version__ = "0.1.0"
