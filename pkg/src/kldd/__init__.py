"""Kalman-smoothed linear deformable diffusion segmentation.

A conditional denoising diffusion model for curvilinear-structure
segmentation (retinal vessels and similar), built on a small float64
reverse-mode autodiff engine. The conditioning feature extractor uses
linear deformable convolutions whose offset chains are smoothed by a
scalar Kalman recurrence; condition features are fused into the
denoiser through spatial and channel attention blocks; training
combines noise prediction with a soft centerline-Dice term.

Heavy submodules are imported lazily so that the CLI can cap BLAS
thread counts before numpy loads.
"""

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "kalman",
    "deform",
    "diffusion",
    "attention",
    "networks",
    "losses",
    "data",
    "optim",
    "config",
    "checkpoint",
    "report",
    "run",
    "cli",
    "errors",
]
