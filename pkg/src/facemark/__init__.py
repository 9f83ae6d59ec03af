"""Desk-scale facial-landmark training and evaluation pipeline.

Submodules:
  geometry    reference faces, weak-perspective pose fits, Euler conversions
  loss        weighted landmark regression losses and their gradients
  network     backbone / auxiliary nets, parameter stores, checkpoints
  data        manifests, cropping, augmentation, attribute stats, annotation
  synth       synthetic schematic-face dataset generator
  training    joint single-stage optimization loop
  evaluation  NME, CED curves, report generation, benchmarking
  cli         command-line entry point
"""

__version__ = "0.1.0"
