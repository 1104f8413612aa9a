"""Question-type guided attention over multi-source visual features."""

__version__ = "0.1.0"
