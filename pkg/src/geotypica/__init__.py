"""geotypica: procedural geo-typical synthetic overhead imagery with labels."""

__version__ = "0.1.0"
