"""Self-supervised dense descriptors on synthetic scenes, keypoint extraction and
behavioral cloning from keypoint observations."""

__version__ = "0.1.0"
