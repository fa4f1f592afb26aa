"""Offline multi-session visual map building and 6-DoF localization."""

__version__ = "0.1.0"
