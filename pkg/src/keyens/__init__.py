"""Random ensembles of key-encrypted classifiers and their evaluation under l-inf attacks."""

__version__ = "0.1.0"
