"""FiBiNet++ and baseline CTR models on a hand-differentiated numpy core."""
__version__ = "0.1.0"
