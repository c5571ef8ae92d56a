"""Desk-scale open-world mobile manipulation benchmark kit."""
__version__ = "0.1.0"
