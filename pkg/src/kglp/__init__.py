"""Subgraph-based inductive knowledge-graph link prediction with implicit
type signals read from language-model embedding stores."""

__version__ = "0.1.0"
