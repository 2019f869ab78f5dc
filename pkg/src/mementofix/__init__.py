"""Repeatable fixity hashing and simulated trusted timestamping for web archives."""

__version__ = "0.1.0"
