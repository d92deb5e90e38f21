"""graphmut: mutation-based differential testing for neural computation graphs."""

__version__ = "0.1.0"
