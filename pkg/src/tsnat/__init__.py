"""Two-step non-autoregressive transformer for sequence transduction."""

__version__ = "0.1.0"
