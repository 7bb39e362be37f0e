"""Joint object detection and multi-label attribute prediction with a
one-stage, feature-pyramid detector trained with focal loss."""

__version__ = "0.1.0"
