"""splatpose: pose-free sparse-view Gaussian-map reconstruction.

Predict pixel-aligned 3D Gaussian maps from uncalibrated multi-view images
with a small transformer, render them with a software splatting rasterizer,
and recover the camera focal length and poses from the predicted Gaussian
positions with iterative solvers.
"""

__version__ = "0.1.0"
