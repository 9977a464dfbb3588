# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: fp32 convolution (fwd/bwd), saturating integer
convolution, and the KL-divergence candidate curve.

Arithmetic contracts mirror quantkit.kernels.pyfallback: integer paths are
bit-identical (same per-element accumulation order (ci, kh, kw), same
clamp-per-add saturation events); fp paths accumulate in float64 and agree
with the fallback to rounding noise.  Compiled with -ffp-contract=off so
double arithmetic stays plain IEEE mul/add.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log

cnp.import_array()

INT16_MIN, INT16_MAX = -32768, 32767
INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1


cdef inline Py_ssize_t _out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t s, Py_ssize_t p) except -1:
    cdef Py_ssize_t out = (size + 2 * p - k) // s + 1
    if out <= 0:
        raise ValueError("convolution output collapsed")
    return out


cdef inline Py_ssize_t _lo_idx(Py_ssize_t off, Py_ssize_t stride) nogil:
    # smallest t >= 0 with t*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi_idx(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t limit, Py_ssize_t n) nogil:
    # one past the largest t < n with t*stride + off <= limit - 1
    cdef Py_ssize_t hi = (limit - 1 - off) // stride + 1
    if off > limit - 1:
        return 0
    return hi if hi < n else n


def conv2d(x, w, int stride=1, int pad=0, int groups=1):
    """fp32 NCHW x OIHW convolution, float64 accumulation."""
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xa = np.ascontiguousarray(x, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] wa = np.ascontiguousarray(w, dtype=np.float32)
    cdef Py_ssize_t n = xa.shape[0], c = xa.shape[1], h = xa.shape[2], wd = xa.shape[3]
    cdef Py_ssize_t o = wa.shape[0], cg = wa.shape[1], kh = wa.shape[2], kw = wa.shape[3]
    if c != cg * groups or o % groups:
        raise ValueError("channel/group mismatch")
    cdef Py_ssize_t og = o // groups
    cdef Py_ssize_t oh = _out_size(h, kh, stride, pad)
    cdef Py_ssize_t ow = _out_size(wd, kw, stride, pad)
    ybuf = np.zeros((n, o, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] yb = ybuf
    cdef float[:, :, :, ::1] xv = xa
    cdef float[:, :, :, ::1] wv = wa
    cdef Py_ssize_t ni, oi, ci, i, j, ohh, oww, cs, ih0, iw0, h_lo, h_hi, w_lo, w_hi, ihh, ch
    cdef double wt
    with nogil:
        for ni in range(n):
            for oi in range(o):
                cs = (oi // og) * cg
                for ci in range(cg):
                    ch = cs + ci
                    for i in range(kh):
                        ih0 = i - pad
                        h_lo = _lo_idx(ih0, stride)
                        h_hi = _hi_idx(ih0, stride, h, oh)
                        for j in range(kw):
                            wt = wv[oi, ci, i, j]
                            if wt == 0.0:
                                continue
                            iw0 = j - pad
                            w_lo = _lo_idx(iw0, stride)
                            w_hi = _hi_idx(iw0, stride, wd, ow)
                            for ohh in range(h_lo, h_hi):
                                ihh = ohh * stride + ih0
                                for oww in range(w_lo, w_hi):
                                    yb[ni, oi, ohh, oww] += wt * <double>xv[ni, ch, ihh, oww * stride + iw0]
    return ybuf.astype(np.float32)


def conv2d_backward(x, w, dy, int stride=1, int pad=0, int groups=1):
    """Gradients of conv2d wrt input and weight; float64 accumulation."""
    cdef cnp.ndarray[cnp.float32_t, ndim=4] xa = np.ascontiguousarray(x, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] wa = np.ascontiguousarray(w, dtype=np.float32)
    cdef cnp.ndarray[cnp.float32_t, ndim=4] ga = np.ascontiguousarray(dy, dtype=np.float32)
    cdef Py_ssize_t n = xa.shape[0], c = xa.shape[1], h = xa.shape[2], wd = xa.shape[3]
    cdef Py_ssize_t o = wa.shape[0], cg = wa.shape[1], kh = wa.shape[2], kw = wa.shape[3]
    if c != cg * groups or o % groups:
        raise ValueError("channel/group mismatch")
    cdef Py_ssize_t og = o // groups
    cdef Py_ssize_t oh = ga.shape[2], ow = ga.shape[3]
    dxbuf = np.zeros((n, c, h, wd), dtype=np.float64)
    dwbuf = np.zeros((o, cg, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] dxv = dxbuf
    cdef double[:, :, :, ::1] dwv = dwbuf
    cdef float[:, :, :, ::1] xv = xa
    cdef float[:, :, :, ::1] wv = wa
    cdef float[:, :, :, ::1] gv = ga
    cdef Py_ssize_t ni, oi, ci, i, j, ohh, oww, cs, ih0, iw0, h_lo, h_hi, w_lo, w_hi, ihh, iww, ch
    cdef double wt, dwacc, g
    with nogil:
        for ni in range(n):
            for oi in range(o):
                cs = (oi // og) * cg
                for ci in range(cg):
                    ch = cs + ci
                    for i in range(kh):
                        ih0 = i - pad
                        h_lo = _lo_idx(ih0, stride)
                        h_hi = _hi_idx(ih0, stride, h, oh)
                        for j in range(kw):
                            iw0 = j - pad
                            w_lo = _lo_idx(iw0, stride)
                            w_hi = _hi_idx(iw0, stride, wd, ow)
                            wt = wv[oi, ci, i, j]
                            dwacc = 0.0
                            for ohh in range(h_lo, h_hi):
                                ihh = ohh * stride + ih0
                                for oww in range(w_lo, w_hi):
                                    iww = oww * stride + iw0
                                    g = gv[ni, oi, ohh, oww]
                                    dxv[ni, ch, ihh, iww] += g * wt
                                    dwacc += g * <double>xv[ni, ch, ihh, iww]
                            dwv[oi, ci, i, j] += dwacc
    return dxbuf.astype(np.float32), dwbuf.astype(np.float32)


def quantized_conv2d(a, w, int stride=1, int pad=0, int groups=1, int accum_bits=32):
    """Integer convolution, saturating accumulation with per-add clamping."""
    cdef long long lo_lim, hi_lim
    if accum_bits == 16:
        lo_lim, hi_lim = INT16_MIN, INT16_MAX
    elif accum_bits == 32:
        lo_lim, hi_lim = INT32_MIN, INT32_MAX
    else:
        raise ValueError(f"accum_bits must be 16 or 32, got {accum_bits}")
    cdef cnp.ndarray[cnp.int32_t, ndim=4] aa = np.ascontiguousarray(a, dtype=np.int32)
    cdef cnp.ndarray[cnp.int32_t, ndim=4] wa = np.ascontiguousarray(w, dtype=np.int32)
    cdef Py_ssize_t n = aa.shape[0], c = aa.shape[1], h = aa.shape[2], wd = aa.shape[3]
    cdef Py_ssize_t o = wa.shape[0], cg = wa.shape[1], kh = wa.shape[2], kw = wa.shape[3]
    if c != cg * groups or o % groups:
        raise ValueError("channel/group mismatch")
    cdef Py_ssize_t og = o // groups
    cdef Py_ssize_t oh = _out_size(h, kh, stride, pad)
    cdef Py_ssize_t ow = _out_size(wd, kw, stride, pad)
    accbuf = np.zeros((n, o, oh, ow), dtype=np.int64)
    cdef long long[:, :, :, ::1] acc = accbuf
    cdef int[:, :, :, ::1] av = aa
    cdef int[:, :, :, ::1] wv = wa
    cdef Py_ssize_t ni, oi, ci, i, j, ohh, oww, cs, ih0, iw0, h_lo, h_hi, w_lo, w_hi, ihh, ch
    cdef long long wt, t, sat = 0
    with nogil:
        for ni in range(n):
            for oi in range(o):
                cs = (oi // og) * cg
                for ci in range(cg):
                    ch = cs + ci
                    for i in range(kh):
                        ih0 = i - pad
                        h_lo = _lo_idx(ih0, stride)
                        h_hi = _hi_idx(ih0, stride, h, oh)
                        for j in range(kw):
                            wt = wv[oi, ci, i, j]
                            if wt == 0:
                                continue
                            iw0 = j - pad
                            w_lo = _lo_idx(iw0, stride)
                            w_hi = _hi_idx(iw0, stride, wd, ow)
                            for ohh in range(h_lo, h_hi):
                                ihh = ohh * stride + ih0
                                for oww in range(w_lo, w_hi):
                                    t = acc[ni, oi, ohh, oww] + wt * <long long>av[ni, ch, ihh, oww * stride + iw0]
                                    if t > hi_lim:
                                        t = hi_lim
                                        sat += 1
                                    elif t < lo_lim:
                                        t = lo_lim
                                        sat += 1
                                    acc[ni, oi, ohh, oww] = t
    total = n * o * oh * ow * cg * kh * kw
    return accbuf.astype(np.int32), int(sat), int(total)


def kl_curve(bins, int levels, double eps=1e-9):
    """KL_j for thresholds j in [levels, len(bins)] under the pinned
    candidate construction (see pyfallback.candidate_pq).

    Runs in O(levels) per candidate using prefix sums over the histogram:
    interior fine bins of a coarse bin share one expanded density, so their
    KL contribution groups into a single log.
    """
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ba = np.ascontiguousarray(bins, dtype=np.float64)
    cdef Py_ssize_t nb = ba.shape[0]
    if levels < 1 or levels > nb:
        raise ValueError("levels outside histogram size")
    out = np.empty(nb - levels + 1, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double[::1] bv = ba
    # prefix sums: S (counts), BLB (b*ln b), NZ (non-empty bins)
    pref = np.zeros(nb + 1, dtype=np.float64)
    prefb = np.zeros(nb + 1, dtype=np.float64)
    prefn = np.zeros(nb + 1, dtype=np.float64)
    cdef double[::1] S = pref
    cdef double[::1] BLB = prefb
    cdef double[::1] NZ = prefn
    mass_a = np.zeros(levels, dtype=np.float64)
    dens_a = np.zeros(levels, dtype=np.float64)
    cdef double[::1] mass = mass_a
    cdef double[::1] dens = dens_a
    cdef Py_ssize_t i, j, c, il, ih, start, cap
    cdef double bi, total, ln_total, tail, last_raw, last_p, wdt, e_p
    cdef double lo, hi, frac_lo, frac_hi, m, d, qsum, sum_plnq, pm, qi, q_last
    cdef bint eps_fired
    with nogil:
        for i in range(nb):
            bi = bv[i]
            S[i + 1] = S[i] + bi
            BLB[i + 1] = BLB[i] + (bi * log(bi) if bi > 0 else 0.0)
            NZ[i + 1] = NZ[i] + (1.0 if bi > 0 else 0.0)
        total = S[nb]
        ln_total = log(total)
        for j in range(levels, nb + 1):
            tail = total - S[j]
            last_raw = bv[j - 1]
            last_p = last_raw + tail
            # reference-side entropy sum(P ln P); bin j-1 handled separately
            e_p = (BLB[j - 1] - S[j - 1] * ln_total) / total
            if last_p > 0:
                e_p += (last_p / total) * (log(last_p) - ln_total)
            wdt = (<double>j) / (<double>levels)
            # pass 1: coarse masses (raw sliced counts) and non-empty coverage
            for c in range(levels):
                lo = c * wdt
                hi = (c + 1) * wdt
                il = <Py_ssize_t>lo
                frac_lo = lo - il
                ih = <Py_ssize_t>hi
                if ih > j:
                    ih = j
                frac_hi = hi - ih if ih < j else 0.0
                start = il + 1 if frac_lo > 0 else il
                m = S[ih] - S[start]
                d = NZ[ih] - NZ[start]
                if frac_lo > 0:
                    m += (1.0 - frac_lo) * bv[il]
                    d += (1.0 - frac_lo) * (1.0 if bv[il] > 0 else 0.0)
                if frac_hi > 0 and ih < j:
                    m += frac_hi * bv[ih]
                    d += frac_hi * (1.0 if bv[ih] > 0 else 0.0)
                mass[c] = m / total
                # bin j-1 is non-empty in P once the tail is absorbed
                if c == levels - 1 and last_raw <= 0 and tail > 0:
                    d += 1.0
                dens[c] = (mass[c] / d) if d > 0 else 0.0
            eps_fired = last_p > 0 and dens[levels - 1] == 0.0
            qsum = eps if eps_fired else 0.0
            for c in range(levels):
                if dens[c] > 0:
                    qsum += mass[c]
            # pass 2: sum(P ln q) grouped by coarse bin
            sum_plnq = 0.0
            for c in range(levels):
                lo = c * wdt
                hi = (c + 1) * wdt
                il = <Py_ssize_t>lo
                frac_lo = lo - il
                ih = <Py_ssize_t>hi
                if ih > j:
                    ih = j
                start = il + 1 if frac_lo > 0 else il
                # interior bins share q = dens[c]
                cap = j - 1 if ih > j - 1 else ih
                if cap > start:
                    pm = (S[cap] - S[start]) / total
                    if pm > 0 and dens[c] > 0:
                        sum_plnq += pm * log(dens[c])
                # left-edge bin shared between c-1 and c
                if frac_lo > 0 and il != j - 1 and bv[il] > 0:
                    qi = frac_lo * dens[c - 1] + (1.0 - frac_lo) * dens[c]
                    sum_plnq += (bv[il] / total) * log(qi)
            if last_p > 0:
                q_last = dens[levels - 1] if dens[levels - 1] > 0 else eps
                sum_plnq += (last_p / total) * log(q_last)
            ov[j - levels] = e_p - sum_plnq + log(qsum)
    return out
