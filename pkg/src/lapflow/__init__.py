"""Laplacian multi-scale flow matching at desk scale.

Subpackages and modules:
  numerics   tensors with reverse-mode autodiff, gradient checking
  rng        deterministic counter-based random streams
  kernels    hot-loop kernels (compiled core with NumPy fallback)
  pyramid    Laplacian decomposition / reconstruction
  schedule   per-scale interpolation paths and stage/time sampling
  model      mixture-of-transformers velocity network
  flowtrain  progressive multi-stage training loop
  odesolve   fixed-step and adaptive ODE integrators with NFE accounting
  sampler    segmented multi-scale sampling with CFG
  baselines  Edify-style and pyramidal renoising flows
  analysis   attention-cost model, FLOP estimates, sample metrics
  cli        command-line entry points
"""

from .kernels import backend_name

__version__ = "0.1.0"

__all__ = ["backend_name", "__version__"]
