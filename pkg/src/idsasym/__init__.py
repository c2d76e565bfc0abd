"""Density-of-states asymptotics for -Δ + b with trigonometric-polynomial b."""

__version__ = "0.1.0"

from .potential import FrequencySet, Potential, PotentialError, ScaleParameters  # noqa: E402,F401
