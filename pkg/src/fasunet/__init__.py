"""Two-stage variational image segmentation: a classical FAS multigrid solver
for the convex multi-phase Mumford-Shah system and the unrolled FAS-Unet."""

__version__ = "0.1.0"
