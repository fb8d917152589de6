"""Tiered-memory visuomotor policy: autodiff core, hierarchical memory,
diffusion action decoder, aliasing benchmark, and streaming trainer."""

__version__ = "0.1.0"
