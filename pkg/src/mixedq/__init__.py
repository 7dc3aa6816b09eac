"""Layer-wise mixed selection of integer non-linear kernels for ViT-style encoders."""

__version__ = "0.1.0"
