"""Variable-resolution vision transformer toolkit built around sequence packing."""

__version__ = "0.1.0"
