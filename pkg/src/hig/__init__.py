"""Heterogeneous image-graph conditioning for a small pixel-space diffusion model.

The package is a numpy library organized around:

- tensor / ops: a reverse-mode autodiff array and the magnitude-preserving
  primitives (forced weight norm, MP-sum, MP-cat, MP-SiLU, pixel norm).
- graph: the heterogeneous image graph data model, builders from scene
  annotations, batching, and the HIG1 on-disk container.
- gnn: the magnitude-preserving heterogeneous graph network that turns a graph
  plus current image features into a conditioning feature map.
- denoiser / training: a small EDM-style denoiser, its ControlNet-style
  conditioning branch, and the two-phase training loop.
- sampler: the deterministic Heun ODE sampler with auto-guidance.
- scenes: a synthetic scene generator and oracle evaluators for conditioning
  fidelity.
- verify / cli: named verification suites and the command-line front end.
"""

from .tensor import DiffArray
from .ops import (
    WEIGHT_EPS,
    NormalizedWeight,
    forced_weight_norm,
    mp_cat,
    mp_silu,
    mp_sum,
    normalized_sum,
    pixel_norm,
    silu_constant,
    zero_gain,
)

__all__ = [
    "DiffArray",
    "WEIGHT_EPS",
    "NormalizedWeight",
    "forced_weight_norm",
    "mp_cat",
    "mp_silu",
    "mp_sum",
    "normalized_sum",
    "pixel_norm",
    "silu_constant",
    "zero_gain",
]

__version__ = "0.1.0"
