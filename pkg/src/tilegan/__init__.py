"""Unpaired image translation on arbitrarily large images via subsample training and tiled inference."""

__version__ = "0.1.0"
