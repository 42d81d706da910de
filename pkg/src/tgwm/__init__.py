"""Text-anchored invariant features and feature-space image watermarking."""

__version__ = "0.1.0"
