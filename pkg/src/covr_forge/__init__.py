"""covr-forge: composed-video-retrieval triplet synthesis and training."""

__version__ = "0.1.0"
