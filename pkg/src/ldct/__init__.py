"""Low-dose CT reconstruction: filtered backprojection followed by a learned denoiser."""

__version__ = "0.1.0"
