"""Hyperbolic-space recommender with visually-attentive user aggregation."""

__version__ = "0.1.0"
