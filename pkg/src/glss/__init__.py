"""Source-only segmentation of shifted-domain images by generative latent search."""
__version__ = "0.1.0"
