"""Kernel backend selection.

The compiled extension is preferred; the pure numpy fallback is selected
when it is missing or when QUANTKIT_FORCE_FALLBACK is set to a non-empty,
non-zero value.  Both backends share the arithmetic contracts documented
in pyfallback; integer kernels are bit-identical across backends.
"""

import os

from . import pyfallback

_force = os.environ.get("QUANTKIT_FORCE_FALLBACK", "0") not in ("", "0")
_impl = None
if not _force:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = None

if _impl is not None:
    BACKEND = "compiled"
    conv2d = _impl.conv2d
    conv2d_backward = _impl.conv2d_backward
    quantized_conv2d = _impl.quantized_conv2d
    kl_curve = _impl.kl_curve
else:
    BACKEND = "fallback"
    conv2d = pyfallback.conv2d
    conv2d_backward = pyfallback.conv2d_backward
    quantized_conv2d = pyfallback.quantized_conv2d
    kl_curve = pyfallback.kl_curve

conv_out_size = pyfallback.conv_out_size
INT16_MIN, INT16_MAX = pyfallback.INT16_MIN, pyfallback.INT16_MAX
INT32_MIN, INT32_MAX = pyfallback.INT32_MIN, pyfallback.INT32_MAX
KL_EPS = pyfallback.KL_EPS
candidate_pq = pyfallback.candidate_pq
