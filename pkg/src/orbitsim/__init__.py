"""Discrete-event simulator of a recirculating in-network key-value cache."""

__version__ = "0.1.0"
