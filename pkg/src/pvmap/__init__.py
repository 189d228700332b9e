"""Aerial mapping of photovoltaic plants: detections, structure, 3D lifting and fusion."""

__version__ = "0.1.0"

__all__ = ["__version__"]
