"""Four-scale attention U-Net vessel segmentation with a topology-aware
composite loss, built on a minimal reverse-mode tensor engine."""

__version__ = "0.1.0"
