"""Multishape diffeomorphic registration with identity and sliding interface constraints."""

__version__ = "0.1.0"
