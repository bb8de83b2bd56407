"""Sensing-aware model-based reinforcement learning on a desk-scale simulator."""

__version__ = "0.1.0"
