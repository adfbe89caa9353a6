"""Sparse-camera 4D Gaussian reconstruction with a spatio-temporal distortion field.

Pure numpy, float64 throughout, with hand-derived reverse-mode gradients.
"""

__version__ = "0.1.0"
