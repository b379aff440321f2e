"""junctionflow - asymptotic expansions for transport through a thin three-arm junction."""

__version__ = "0.1.0"
