"""Integer-only quantization and data-free calibration for small
convolutional speech models."""

__version__ = "0.1.0"
