"""Reaction-diffusion-advection through an evolving thin channel layer.

Subpackages:
  geometry      reference cell, channel shapes, tiling
  transform     prescribed channel evolution and pulled-back coefficients
  fem           P1 meshes, assembly, linear solves
  micro         time stepper for the resolved layer problem
  unfolding     discrete unfold/average operators and two-scale errors
  macro         homogenized bulk problem coupled to local cell problems
  harness       sweeps, order studies, report persistence
  cli           command-line entry point
"""

__version__ = "0.1.0"
