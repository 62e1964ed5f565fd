"""Single-source domain expansion for cross-scene hyperspectral patch classification."""
__version__ = "0.1.0"
