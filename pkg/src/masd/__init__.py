"""Multi-agent skill discovery with vector-quantized codebooks on a toy cooperative grid world."""

__version__ = "0.1.0"
