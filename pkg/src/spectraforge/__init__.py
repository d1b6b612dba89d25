"""Hyperspectral reconstruction toolkit for an active-illumination LED camera.

Submodules cover cube I/O, calibration, spot masking, registration,
spectral projection and scoring, augmentation, a small autodiff network,
training and a synthetic camera simulator.
"""

__version__ = "0.1.0"
