"""Gray-box surrogate modeling for stochastic differential equations."""

__version__ = "0.1.0"
