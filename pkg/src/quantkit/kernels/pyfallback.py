"""Pure numpy implementations of the hot kernels.

Semantics mirrored bit-for-bit by the compiled core where the arithmetic is
exact (integer convolution, saturation audits) and to float rounding noise
where it is not (fp32 convolution accumulates in float64, KL curves are
plain double sums).

Pinned conventions shared by both backends:

* conv accumulation order per output element is (in-channel, kh, kw);
  INT16 saturation clamps after every single add, so the order is part of
  the contract,
* fp32 convolution accumulates in float64 and rounds once to float32,
* quantized convolution zero-pads (integer zero == real zero for symmetric
  scales),
* KL candidates: reference P takes the clipped tail into its last bin, the
  quantized candidate Q is built from the raw sliced histogram, expanded
  uniformly over the bins that are non-empty in P, with 1e-9 substituted
  where P has mass but Q none.
"""

from __future__ import annotations

import numpy as np

INT16_MIN, INT16_MAX = -32768, 32767
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    out = (size + 2 * pad - kernel) // stride + 1
    if out <= 0:
        raise ValueError(f"convolution output collapsed: size={size} k={kernel} s={stride} p={pad}")
    return out


def _pad_nchw(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _group_geometry(x: np.ndarray, w: np.ndarray, groups: int):
    n, c, h, width = x.shape
    o, cg, kh, kw = w.shape
    if c != cg * groups or o % groups:
        raise ValueError(f"channel/group mismatch: x has {c} channels, weight {w.shape}, groups={groups}")
    return n, c, h, width, o, cg, kh, kw, o // groups


def conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0, groups: int = 1) -> np.ndarray:
    """fp32 NCHW x OIHW convolution (cross-correlation), float64 accumulation."""
    n, c, h, width, o, cg, kh, kw, og = _group_geometry(x, w, groups)
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(width, kw, stride, pad)
    xp = _pad_nchw(x.astype(np.float64), pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    w64 = w.astype(np.float64)
    out = np.empty((n, o, oh, ow), dtype=np.float64)
    for g in range(groups):
        cs, os_ = g * cg, g * og
        out[:, os_:os_ + og] = np.einsum(
            "nchwij,ocij->nohw", win[:, cs:cs + cg], w64[os_:os_ + og], optimize=True
        )
    return out.astype(np.float32)


def conv2d_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray,
                    stride: int = 1, pad: int = 0, groups: int = 1):
    """Gradients of conv2d wrt input and weight; float64 accumulation."""
    n, c, h, width, o, cg, kh, kw, og = _group_geometry(x, w, groups)
    oh, ow = dy.shape[2], dy.shape[3]
    xp = _pad_nchw(x.astype(np.float64), pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :oh, :ow]
    w64 = w.astype(np.float64)
    dy64 = dy.astype(np.float64)
    dxp = np.zeros_like(xp)
    dw = np.zeros(w.shape, dtype=np.float64)
    for g in range(groups):
        cs, os_ = g * cg, g * og
        dy_g = dy64[:, os_:os_ + og]
        dw[os_:os_ + og] = np.einsum("nohw,nchwij->ocij", dy_g, win[:, cs:cs + cg], optimize=True)
        for i in range(kh):
            for j in range(kw):
                t = np.einsum("nohw,oc->nchw", dy_g, w64[os_:os_ + og, :, i, j], optimize=True)
                dxp[:, cs:cs + cg, i:i + oh * stride:stride, j:j + ow * stride:stride] += t
    dx = dxp[:, :, pad:pad + h, pad:pad + width] if pad else dxp
    return dx.astype(np.float32), dw.astype(np.float32)


def quantized_conv2d(a: np.ndarray, w: np.ndarray, stride: int = 1, pad: int = 0,
                     groups: int = 1, accum_bits: int = 32):
    """Integer convolution with saturating accumulation.

    ``a`` and ``w`` are int32 (values already within their quantized
    ranges).  Every intermediate sum is clamped to the accumulator range
    and each clamping event is counted.  Returns (acc int32, saturated,
    total adds).
    """
    if accum_bits == 16:
        lo, hi = INT16_MIN, INT16_MAX
    elif accum_bits == 32:
        lo, hi = INT32_MIN, INT32_MAX
    else:
        raise ValueError(f"accum_bits must be 16 or 32, got {accum_bits}")
    n, c, h, width, o, cg, kh, kw, og = _group_geometry(a, w, groups)
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(width, kw, stride, pad)
    ap = _pad_nchw(a.astype(np.int64), pad)
    w64 = w.astype(np.int64)
    acc = np.zeros((n, o, oh, ow), dtype=np.int64)
    saturated = 0
    for g in range(groups):
        cs, os_ = g * cg, g * og
        acc_g = acc[:, os_:os_ + og]
        for ci in range(cg):
            for i in range(kh):
                for j in range(kw):
                    patch = ap[:, cs + ci, i:i + oh * stride:stride, j:j + ow * stride:stride]
                    term = patch[:, None, :, :] * w64[None, os_:os_ + og, ci, i, j, None, None]
                    raw = acc_g + term
                    clipped = np.clip(raw, lo, hi)
                    saturated += int(np.count_nonzero(raw != clipped))
                    acc_g[...] = clipped
    total = n * o * oh * ow * cg * kh * kw
    return acc.astype(np.int32), int(saturated), int(total)


# --- KL curve -------------------------------------------------------------

KL_EPS = 1e-9


def candidate_pq(bins: np.ndarray, j: int, levels: int, eps: float = KL_EPS):
    """Build the (P, Q) pair for clipping threshold ``j`` (bins kept).

    P is the clipped reference (tail absorbed into bin j-1, normalized);
    Q merges the raw first j bins into ``levels`` coarse bins of fractional
    width j/levels and expands each coarse bin's mass uniformly over the
    fine bins that are non-empty in P.  Both are returned over the full
    histogram length with zeros past bin j.
    """
    b = np.asarray(bins, dtype=np.float64)
    nb = b.size
    total = b.sum()
    if total <= 0:
        raise ValueError("empty histogram")
    if not levels <= j <= nb:
        raise ValueError(f"candidate j={j} outside [{levels}, {nb}]")

    p = np.zeros(nb)
    p[:j] = b[:j]
    p[j - 1] += b[j:].sum()
    p /= total
    nzp = p[:j] > 0

    q_src = b[:j] / total
    w = j / levels
    idx = np.arange(j, dtype=np.float64)
    c0 = np.floor(idx / w).astype(np.int64)
    np.clip(c0, 0, levels - 1, out=c0)
    in_c0 = np.minimum((c0 + 1) * w - idx, 1.0)
    in_c1 = 1.0 - in_c0
    c1 = np.minimum(c0 + 1, levels - 1)
    in_c1[c0 + 1 > levels - 1] = 0.0

    mass = (np.bincount(c0, weights=q_src * in_c0, minlength=levels)
            + np.bincount(c1, weights=q_src * in_c1, minlength=levels))
    den = (np.bincount(c0, weights=nzp * in_c0, minlength=levels)
           + np.bincount(c1, weights=nzp * in_c1, minlength=levels))
    dens = np.divide(mass, den, out=np.zeros(levels), where=den > 0)

    q = np.zeros(nb)
    q[:j] = np.where(nzp, in_c0 * dens[c0] + in_c1 * dens[c1], 0.0)
    fill = np.zeros(nb, dtype=bool)
    fill[:j] = nzp & (q[:j] == 0.0)
    q[fill] = eps
    q /= q.sum()
    return p, q


def kl_curve(bins: np.ndarray, levels: int, eps: float = KL_EPS) -> np.ndarray:
    """KL_j for every threshold j in [levels, len(bins)] (inclusive)."""
    b = np.asarray(bins, dtype=np.float64)
    nb = b.size
    out = np.empty(nb - levels + 1)
    for j in range(levels, nb + 1):
        p, q = candidate_pq(b, j, levels, eps)
        mask = p > 0
        out[j - levels] = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return out
