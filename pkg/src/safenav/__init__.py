"""Safe-navigation laboratory for differential-drive ground vehicles."""

__version__ = "0.1.0"
