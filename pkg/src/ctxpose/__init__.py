"""Context-aware 6D object pose estimation from RGB-D crops."""

__version__ = "0.1.0"
