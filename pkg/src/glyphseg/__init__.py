"""Glyph-block segmentation pipeline.

Converts expert polygon annotations into binary masks, fine-tunes the mask
decoder of a frozen-encoder promptable segmenter with a combined
Dice + Cross-Entropy loss, and evaluates zero-shot vs. fine-tuned models
under seeded point/box prompt strategies.
"""

__version__ = "0.1.0"
