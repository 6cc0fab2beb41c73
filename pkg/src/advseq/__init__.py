"""Attacks and defenses for recurrent classifiers over discrete token sequences."""

__version__ = "0.1.0"
