"""Layer-wise noise stability regularization lab."""

__version__ = "0.1.0"
