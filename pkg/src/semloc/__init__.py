"""Localization against sparse semantic element maps via blind PnPL."""

__version__ = "0.1.0"
