"""Dual-branch masked-autoencoder pre-training and multi-view fine-tuning for
no-reference point cloud quality assessment."""

__version__ = "0.1.0"
