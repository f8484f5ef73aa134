"""Egocentric 3D hand-reach trajectory forecasting at desk scale.

Subpackages:

- ``autodiff``   dense float64 tensors with reverse-mode differentiation
- ``geometry``   pinhole projection and camera pose chains
- ``annotate``   trajectory fusion and least-squares depth repair
- ``model``      the masked state-space transformer forecaster
- ``losses``     uncertainty-aware and velocity training losses
- ``datagen``    synthetic egocentric-reach dataset generator and wire format
- ``trainer``    normalization, optimization loop, ADE/FDE evaluation
- ``cli``        command-line entry point (``reachcast``)
"""

__version__ = "0.1.0"
