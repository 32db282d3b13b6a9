"""Black-box transfer attacks on image classifiers via a substitute model."""

__version__ = "0.1.0"
