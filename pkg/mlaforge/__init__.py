# mlaforge/__init__.py
"""MHA/GQA to latent-attention checkpoint conversion toolkit."""

__version__ = "1.0.0"
