"""Model-based drone localization against a wind-turbine skeleton."""

__version__ = "0.1.0"
