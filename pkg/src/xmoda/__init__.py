"""Multi-view cross-modality translation and segmentation at desk scale."""

__version__ = "0.1.0"
