"""Four atoms on a line: hyperspherical adiabatic curves, bound states and level statistics."""

__version__ = "0.1.0"
