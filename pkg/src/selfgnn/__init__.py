"""Self-supervised GNN embeddings without explicit negative sampling."""

__version__ = "0.1.0"
