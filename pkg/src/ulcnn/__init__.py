"""Ultra-lite CNN for automatic modulation classification, written against plain numpy."""

__version__ = "0.1.0"
