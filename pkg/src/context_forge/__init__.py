"""In-context scene text removal and segmentation on a numpy autodiff engine."""

__version__ = "0.1.0"
