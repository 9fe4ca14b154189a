"""Cross-lingual phrase retrieval: encoders, contrastive training, exact search."""

__version__ = "0.1.0"
