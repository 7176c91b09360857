"""Lung-CT infection segmentation with attention fusion and cGAN augmentation."""

__version__ = "0.1.0"
