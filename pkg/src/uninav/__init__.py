"""Deep Q-learning for unsignalized intersection crossing among pedestrians."""

__version__ = "0.1.0"
