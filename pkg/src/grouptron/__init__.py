"""Group-aware multi-scale pedestrian trajectory forecasting on numpy."""

__version__ = "0.1.0"
