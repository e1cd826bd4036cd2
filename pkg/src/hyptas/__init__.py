"""Hyperbolic-geometry-guided diffusion for temporal action segmentation.

Desk-scale library: Poincare-ball kernels, a reverse-mode tape with exact
gradients, a two-phase diffusion trainer with prototype anchors, a
deterministic skip-step sampler, a synthetic hierarchical-action generator,
and the standard segmentation metric suite.
"""

__version__ = "0.1.0"
