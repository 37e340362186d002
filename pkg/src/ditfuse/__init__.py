"""Instruction-driven diffusion-transformer image fusion at desk scale."""

from ditfuse.kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
