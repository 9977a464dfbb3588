"""quantkit: a desk-scale post-training quantization toolkit.

Tolerance-KL activation calibration, channel-wise MinMax weights, unsigned
quantization after ReLU, fp element-wise Add, BN folding, bit-exact integer
convolution with INT16/INT32 accumulation, STE-based quantization-aware
fine-tuning, and a prune -> fine-tune -> PTQ -> QAT pipeline.
"""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
