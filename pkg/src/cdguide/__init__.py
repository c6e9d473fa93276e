"""Hard-constraint guidance for score-based diffusion models by Doob's h-transform."""

__version__ = "0.1.0"
