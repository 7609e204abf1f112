"""Spherical CNNs for diffusion MRI microstructure estimation.

Modules
-------
sph
    Even-degree real spherical harmonics, transforms, rotations, grids.
model
    Acquisition schemes, compartment models, ODFs and signal simulation.
nn
    Autodiff core, spherical CNN, MLP baselines and training.
fit
    Spherical mean technique (SMT) fitting and MLP input features.
eval
    Accuracy, orientational variance and failure-rate metrics.
cli
    Command-line interface and NIfTI-1 volume I/O.
"""

__version__ = "0.1.0"
