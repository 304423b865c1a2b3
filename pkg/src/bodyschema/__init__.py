"""Learning a kinematic body schema extended by virtual joints from keypoints,
and planning actions through it."""

__version__ = "0.1.0"
