"""Phoneme decoding from MEG windows: preprocessing, models, training and saliency analysis."""

__version__ = "0.1.0"
