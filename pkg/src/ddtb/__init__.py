"""Dynamic dual trainable bounds: low-bit quantization-aware training for SR networks."""
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
