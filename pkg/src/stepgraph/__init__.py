"""Pre-training enhanced spatiotemporal graph forecasting at desk scale."""

__version__ = "0.1.0"
