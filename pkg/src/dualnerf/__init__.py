"""Desk-scale audio-driven dual radiance field renderer.

A from-scratch differentiable rendering engine: reverse-mode autodiff core,
audio-keyed reference feature aggregation, dual audio-associated /
audio-independent radiance fields, regionwise ray sampling, volume
rendering, and a procedural synthetic talking-scene generator with an
analytic ground-truth oracle.
"""

__version__ = "0.1.0"
