"""Vectorised multi-agent underwater target tracking with transformer MAPPO."""
__version__ = "0.1.0"
