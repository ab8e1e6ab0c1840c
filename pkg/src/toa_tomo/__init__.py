"""Time-of-arrival microwave tomography: FDTD forward model and learned-update reconstruction."""

__version__ = "0.1.0"
