"""Monte Carlo laboratory for insider information, short-sale bans and minimal measures."""

__version__ = "0.1.0"
