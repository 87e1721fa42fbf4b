"""Synthetic fluoroscopy instance segmentation: data generation, segmenters and COCO-style evaluation."""

__version__ = "0.1.0"
