"""Patch-level area-constrained segmentation with entropic optimal transport.

Subpackages are plain modules: ``ot`` (Sinkhorn), ``area`` (class-area
model), ``network`` (toy encoder), ``losses``, ``spectral`` (unsupervised
labels), ``metrics``, ``synth`` (data), ``train`` and ``cli``.
"""

__version__ = "0.1.0"
