"""Feedback-assisted adversarial CBCT-to-CT translation toolkit."""

__version__ = "0.1.0"

from .volume import Volume, load_volume, save_volume  # noqa: F401
