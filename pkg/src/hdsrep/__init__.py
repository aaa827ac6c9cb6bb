"""Sender reputation from aggregated historical email-log data."""

__version__ = "0.1.0"
