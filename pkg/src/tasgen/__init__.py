"""Dynamic per-step labels from single-date samples via temporal-spectral embedding."""

__version__ = "0.1.0"
