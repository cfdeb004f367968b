"""Multi-spectral Gaussian splatting with a shared neural color decoder.

One set of 3D Gaussians is optimized against images from several spectral
bands; each primitive carries a small feature vector that a shared MLP maps to
the colors of every band.
"""

__version__ = "0.1.0"
