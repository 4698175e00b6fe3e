"""STL formulae to vectors: kernel embeddings of signal temporal logic."""
__version__ = "0.1.0"
