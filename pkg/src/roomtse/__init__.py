"""Target speech extraction conditioned on speaker distance and room acoustics."""

__version__ = "0.1.0"
