"""Self-supervised, segmentation-oriented visible/infrared image fusion."""

__version__ = "0.1.0"
