"""Stereo depth from raw SGM disparity refined by a guided diffusion model."""

__version__ = "0.1.0"
