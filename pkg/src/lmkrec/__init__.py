"""Recognition-by-retrieval engine for landmark recognition."""

__version__ = "0.1.0"
