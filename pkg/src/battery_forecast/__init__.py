"""Battery forecast - early-cycle SOH trajectory forecasting for lithium-ion batteries."""

__version__ = "0.1.0"
