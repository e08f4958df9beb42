"""Multirate video analysis toolkit.

Building blocks for frame-rate robust video recognition experiments:
random temporal skipping clip samplers, occlusion-aware unsupervised
optical-flow loss kernels with verified analytic gradients, compact
bilinear (Tensor Sketch) feature encoding, a synthetic sprite corpus with
exact ground-truth flow and occlusion, and an end-to-end robustness
experiment over frame-rate perturbations.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
