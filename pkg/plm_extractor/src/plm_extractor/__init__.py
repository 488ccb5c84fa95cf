"""Offline language-model feature extraction for the kglp embedding-store
format, and perplexity-based scoring of verbalized triples."""

__version__ = "0.1.0"
