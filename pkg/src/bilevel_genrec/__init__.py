"""Bi-level training of an RQ-VAE item tokenizer and an encoder-decoder generative recommender."""

__version__ = "0.1.0"
