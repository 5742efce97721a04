"""Unsupervised image-motion embeddings learned by recomposing image sequences."""

__version__ = "0.1.0"
