"""Graph signal processing for 3D point clouds: sampling, super-resolution and denoising."""

__version__ = "0.1.0"
