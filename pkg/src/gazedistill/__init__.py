"""Gaze- and text-guided teacher-student training for weakly supervised segmentation."""

__version__ = "0.1.0"
