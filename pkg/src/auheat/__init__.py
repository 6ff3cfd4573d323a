"""Joint AU localisation and intensity estimation by heatmap regression."""

__version__ = "0.1.0"
