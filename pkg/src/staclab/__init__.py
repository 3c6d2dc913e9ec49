"""Self-tuning actor-critic (STAC/STACX) with leaky V-trace."""

from staclab.kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
