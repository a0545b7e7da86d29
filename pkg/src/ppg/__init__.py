"""Plan-and-render product poster generation at desk scale."""

__version__ = "0.1.0"
