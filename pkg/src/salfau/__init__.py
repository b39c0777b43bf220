"""Salient object detection with an attention U-Net on a numpy autodiff engine."""

__version__ = "0.1.0"
