"""parkopt: open-space parking trajectory planning toolkit."""

__version__ = "0.1.0"
