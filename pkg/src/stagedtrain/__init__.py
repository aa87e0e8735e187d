"""Progressive staged training against unlearnable-example data protection."""

__version__ = "0.1.0"
