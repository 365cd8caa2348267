"""Visually-conditioned text-to-speech at desk scale.

Given a phoneme sequence, a per-frame visual feature sequence and a speaker
embedding, the model synthesizes a melspectrogram whose length is locked to
4x the video length (25 fps video, 10 ms mel hop). Subpackages cover the
mel/Griffin-Lim DSP chain, the phoneme frontend, a synthetic paired corpus
used as a verification oracle, the trainable network, the optimization loop
and the STOI/alignment evaluation suite.
"""

__version__ = "0.1.0"


class VisottsError(Exception):
    """Base class for all errors raised by this package."""
