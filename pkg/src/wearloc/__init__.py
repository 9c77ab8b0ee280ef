"""Wearing-location detection for smart devices carried by pedestrians and cyclists."""

__version__ = "0.1.0"
