"""3D attention mapping: RGB-D reconstruction, eye-tracker localization, gaze and ROI analytics."""

__version__ = "0.1.0"
