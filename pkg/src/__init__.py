"""smokeseg - two-path smoke segmentation network, synthetic data and detection"""

__version__ = "1.0.0"
