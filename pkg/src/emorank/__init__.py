"""Emotion-intensity ranking for controllable emotional TTS.

The package trains a rank model on mixup-augmented pairs of neutral and
emotional speech features, scores utterances by the amount of non-neutral
emotion they carry, and turns those scores into a Min/Median/Max intensity
codebook plus phoneme-aligned conditioning vectors for a TTS backend.
"""

__version__ = "0.1.0"

NEUTRAL_LABEL = "neutral"


def is_neutral(label: str) -> bool:
    """True if an emotion label names the neutral class (case-insensitive)."""
    return label.strip().lower() == NEUTRAL_LABEL
