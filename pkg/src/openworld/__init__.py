"""Open-world image classification: stacked CNN committee with an oracle loop."""

__version__ = "0.1.0"
