"""Tone-decorated Mandarin text-to-speech on a small numpy autodiff engine."""

__version__ = "0.1.0"
