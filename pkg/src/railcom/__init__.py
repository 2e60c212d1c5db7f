"""Event-driven perception middleware between a small detector/tracker and a large multimodal model."""

__version__ = "0.1.0"
