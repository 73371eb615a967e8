"""Joint multi-object tracking and diverse trajectory forecasting, desk-scale."""

__version__ = "0.1.0"
