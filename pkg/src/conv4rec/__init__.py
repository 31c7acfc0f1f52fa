"""Convolutional autoencoder recommender with distributional outputs."""

__version__ = "0.1.0"
