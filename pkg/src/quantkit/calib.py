"""Quantization scale determination.

Activations: 2048-bin histograms of absolute non-zero values, swept with a
KL-divergence criterion over clipping thresholds j in [L, 2048] (L = level
count).  Rather than the plain KL minimum, the selected threshold is the
LARGEST j whose divergence stays within ``tolerance`` times the minimum;
scale = (j + 0.5) * bin_width / L.  Weights: plain MinMax, layer-wise or
per output channel.

Candidate construction (shared with the kernels, pinned so independent
reimplementations can match exactly):

* reference P: first j bins, tail mass absorbed into bin j-1, normalized;
* candidate Q: raw first j bins merged into L coarse bins of fractional
  width j/L (mass split proportionally at the boundaries) and expanded
  uniformly over the fine bins that are non-empty in P;
* Q bins that stay empty where P has mass get 1e-9 before normalizing;
* KL over P's support.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels, nnexec
from .errors import DegenerateSiteError, ValidationError
from .graph import INPUT_ID, ModelGraph, edge_key

NBINS = 2048
KL_EPS = kernels.KL_EPS
_F32_TINY = float(np.finfo(np.float32).tiny)


def level_count(bitwidth: int, signedness: str) -> int:
    """Quantization levels on the positive side: 2^(b-1) signed (the paper's
    128 for 8-bit), 2^b - 1 unsigned (levels double, minus the zero)."""
    if signedness == "signed":
        return 1 << (bitwidth - 1)
    if signedness == "unsigned":
        return (1 << bitwidth) - 1
    raise ValidationError(f"bad signedness {signedness!r}")


def int_range(bitwidth: int, signedness: str):
    """Representable integer range; signed is symmetric (-2^(b-1) unused)."""
    if signedness == "signed":
        m = (1 << (bitwidth - 1)) - 1
        return -m, m
    if signedness == "unsigned":
        return 0, (1 << bitwidth) - 1
    raise ValidationError(f"bad signedness {signedness!r}")


@dataclass
class QuantParams:
    """Scale(s) + integer format for one quantization site."""

    scales: object  # float (layer-wise) or float64 ndarray (channel-wise)
    bitwidth: int
    signedness: str  # "signed" | "unsigned"
    granularity: str  # "layer" | "channel"

    def __post_init__(self):
        if self.granularity not in ("layer", "channel"):
            raise ValidationError(f"bad granularity {self.granularity!r}")
        if self.signedness not in ("signed", "unsigned"):
            raise ValidationError(f"bad signedness {self.signedness!r}")
        if not 2 <= self.bitwidth <= 8:
            raise ValidationError(f"bitwidth must be in [2,8], got {self.bitwidth}")
        arr = np.asarray(self.scales, dtype=np.float64)
        if np.any(arr <= 0) or not np.all(np.isfinite(arr)):
            raise ValidationError("scales must be positive and finite")
        if self.granularity == "channel" and arr.ndim != 1:
            raise ValidationError("channel-wise params need a 1-D scale vector")

    @property
    def qmin(self):
        return int_range(self.bitwidth, self.signedness)[0]

    @property
    def qmax(self):
        return int_range(self.bitwidth, self.signedness)[1]

    def scale_array(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.scales, dtype=np.float64))


@dataclass
class Histogram:
    bins: np.ndarray  # int64[NBINS]
    bin_width: float
    max_value: float
    total: int

    def __post_init__(self):
        if self.bins.shape != (NBINS,):
            raise ValidationError(f"histogram must have {NBINS} bins")
        if self.total != int(self.bins.sum()):
            raise ValidationError("histogram total does not match bin counts")


@dataclass
class KLCurve:
    start: int  # first candidate index (== level count)
    kl: np.ndarray  # KL_j for j in [start, NBINS]
    id_min: int
    kl_min: float
    id_opt: int
    tolerance: float

    def kl_at(self, j: int) -> float:
        if not self.start <= j <= NBINS:
            raise ValidationError(f"candidate {j} outside [{self.start}, {NBINS}]")
        return float(self.kl[j - self.start])


@dataclass
class CalibConfig:
    tolerance: float = 1.3
    batches: int = 8
    bitwidth: int = 8
    batch_size: int = 32

    def __post_init__(self):
        if self.tolerance < 1.0:
            raise ValidationError(f"tolerance must be >= 1, got {self.tolerance}")
        if self.batches < 1:
            raise ValidationError("need at least one calibration batch")
        if not 2 <= self.bitwidth <= 8:
            raise ValidationError(f"bitwidth must be in [2,8], got {self.bitwidth}")


@dataclass
class SiteCalibration:
    params: QuantParams
    curve: Optional[KLCurve] = None


@dataclass
class CalibrationProfile:
    sites: dict = field(default_factory=dict)  # edge key -> SiteCalibration
    tolerance: float = 1.3
    bitwidth: int = 8

    def __contains__(self, key):
        return key in self.sites

    def params_for(self, key: str) -> QuantParams:
        return self.sites[key].params


def build_histogram(values: np.ndarray, site_id: str = "<anon>") -> Histogram:
    """Histogram of already-absolute, already-nonzero activation samples."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DegenerateSiteError(site_id, f"site {site_id!r}: no non-zero activations")
    max_value = float(v.max())
    width = max_value / NBINS
    idx = (v / width).astype(np.int64)
    np.clip(idx, 0, NBINS - 1, out=idx)
    bins = np.bincount(idx, minlength=NBINS).astype(np.int64)
    return Histogram(bins=bins, bin_width=width, max_value=max_value, total=int(v.size))


def collect_histograms(g: ModelGraph, data: nnexec.Dataset, batches: int,
                       sites, batch_size: int = 32) -> dict:
    """Pool |activations| - {0} per site over ``batches`` calibration
    batches and bin the pooled values (max taken over all batches)."""
    sites = list(sites)
    node_sites = [s for s in sites if s != INPUT_ID]
    pools = {s: [] for s in sites}
    n = len(data)
    if n == 0:
        raise ValidationError("empty calibration set")
    for b in range(batches):
        lo = (b * batch_size) % n
        xb = data.x[lo:lo + batch_size]
        if len(xb) == 0:
            xb = data.x[:batch_size]
        _, trace = nnexec.forward(g, xb, sites=node_sites)
        if INPUT_ID in pools:
            trace = dict(trace)
            trace[INPUT_ID] = xb
        for s in sites:
            v = np.abs(trace[s].ravel())
            pools[s].append(v[v > 0])
    out = {}
    for s in sites:
        vals = np.concatenate(pools[s]) if pools[s] else np.empty(0)
        if vals.size == 0:
            raise DegenerateSiteError(s)
        out[s] = build_histogram(vals, site_id=s)
    return out


def merge_and_expand(h: Histogram, j: int, levels: int):
    """(P, Q) for clipping threshold ``j``; see the module docstring for the
    pinned construction.  Returns two NBINS-long distributions, zero past j."""
    if j < levels:
        raise ValidationError(f"candidate j={j} below level count {levels}")
    if j > NBINS:
        raise ValidationError(f"candidate j={j} beyond histogram size {NBINS}")
    return kernels.candidate_pq(h.bins.astype(np.float64), j, levels, KL_EPS)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum(P_i ln(P_i/Q_i)) over P's support; empty Q bins get 1e-9."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValidationError(f"distribution length mismatch: {p.shape} vs {q.shape}")
    if abs(p.sum() - 1.0) > 1e-9 or abs(q.sum() - 1.0) > 1e-9:
        raise ValidationError("distributions must be normalized")
    mask = p > 0
    qm = np.where(q[mask] == 0.0, KL_EPS, q[mask])
    return float(np.sum(p[mask] * np.log(p[mask] / qm)))


def sweep_scale(h: Histogram, cfg: CalibConfig, signedness: str = "signed"):
    """Tolerance-KL threshold sweep; returns (scale, KLCurve).

    With T = 1 this is the plain min-KL rule (largest index attaining the
    minimum); as T grows the chosen index moves right and in the limit the
    sweep degenerates to MinMax of the observed range.
    """
    if h.total <= 0:
        raise DegenerateSiteError("<histogram>", "empty histogram")
    lv = level_count(cfg.bitwidth, signedness)
    curve = np.asarray(kernels.kl_curve(h.bins.astype(np.float64), lv, KL_EPS))
    id_min = lv + int(np.argmin(curve))  # first index on ties
    kl_min = float(curve[id_min - lv])
    band = curve <= cfg.tolerance * kl_min
    id_opt = lv + int(np.nonzero(band)[0].max())
    scale = (id_opt + 0.5) * h.bin_width / lv
    return scale, KLCurve(start=lv, kl=curve, id_min=id_min, kl_min=kl_min,
                          id_opt=id_opt, tolerance=cfg.tolerance)


def calibrate(g: ModelGraph, data: nnexec.Dataset, cfg: CalibConfig,
              threads: int = 1) -> CalibrationProfile:
    """Per-site activation scales for every edge planned as quantized.

    Requires ``quantize.plan_placement`` to have annotated the graph.
    Histograms are keyed by producer; edges sharing a producer and
    signedness share one sweep.
    """
    if g.quant_sites is None:
        raise ValidationError("graph has no placement plan; run plan_placement first")
    quantized = [s for s in g.quant_sites if s.quantize]
    producers = sorted({s.edge[0] for s in quantized})
    hists = collect_histograms(g, data, cfg.batches, producers, cfg.batch_size)
    keys = sorted({(s.edge[0], s.signedness) for s in quantized})

    def _sweep(key):
        src, signedness = key
        return key, sweep_scale(hists[src], cfg, signedness)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            swept = dict(pool.map(_sweep, keys))
    else:
        swept = dict(map(_sweep, keys))

    profile = CalibrationProfile(tolerance=cfg.tolerance, bitwidth=cfg.bitwidth)
    for site in quantized:
        scale, curve = swept[(site.edge[0], site.signedness)]
        params = QuantParams(scales=scale, bitwidth=cfg.bitwidth,
                             signedness=site.signedness, granularity="layer")
        profile.sites[site.key] = SiteCalibration(params=params, curve=curve)
    return profile


def minmax_scale(w: np.ndarray, bitwidth: int, granularity: str = "channel") -> QuantParams:
    """MinMax weight scales: max|w| / (2^(b-1)-1), per tensor or per output
    channel (axis 0).  All-zero channels fall back to the smallest positive
    normal float32 so downstream division stays finite."""
    if w.size == 0:
        raise ValidationError("empty weight tensor")
    qmax = (1 << (bitwidth - 1)) - 1
    if granularity == "layer":
        m = float(np.abs(w).max())
        return QuantParams(scales=(m / qmax) if m > 0 else _F32_TINY,
                           bitwidth=bitwidth, signedness="signed", granularity="layer")
    if granularity == "channel":
        m = np.abs(w.reshape(w.shape[0], -1)).max(axis=1).astype(np.float64)
        scales = np.where(m > 0, m / qmax, _F32_TINY)
        return QuantParams(scales=scales, bitwidth=bitwidth,
                           signedness="signed", granularity="channel")
    raise ValidationError(f"bad granularity {granularity!r}")


# --- profile serialization ---------------------------------------------------

def save_profile(profile: CalibrationProfile, path) -> None:
    doc = {
        "format": "quantkit-profile",
        "version": 1,
        "tolerance": profile.tolerance,
        "bitwidth": profile.bitwidth,
        "sites": {},
    }
    for key, sc in sorted(profile.sites.items()):
        entry = {
            "scale": float(np.asarray(sc.params.scales)),
            "bitwidth": sc.params.bitwidth,
            "signedness": sc.params.signedness,
            "granularity": sc.params.granularity,
        }
        if sc.curve is not None:
            entry.update(id_min=sc.curve.id_min, id_opt=sc.curve.id_opt,
                         kl_min=sc.curve.kl_min, tolerance=sc.curve.tolerance)
        doc["sites"][key] = entry
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_profile(path) -> CalibrationProfile:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != "quantkit-profile":
        raise ValidationError("not a quantkit calibration profile")
    profile = CalibrationProfile(tolerance=doc["tolerance"], bitwidth=doc["bitwidth"])
    for key, entry in doc["sites"].items():
        params = QuantParams(scales=entry["scale"], bitwidth=entry["bitwidth"],
                             signedness=entry["signedness"], granularity=entry["granularity"])
        profile.sites[key] = SiteCalibration(params=params, curve=None)
    return profile


def dump_kl_csv(profile: CalibrationProfile, out_dir) -> list:
    """One headerless CSV per site: rows ``j,KL_j`` for j in [L, 2048]."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for key, sc in sorted(profile.sites.items()):
        if sc.curve is None:
            continue
        fname = key.replace("->", "__to__").replace("/", "_") + ".csv"
        path = os.path.join(out_dir, fname)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for j in range(sc.curve.start, NBINS + 1):
                writer.writerow([j, repr(float(sc.curve.kl[j - sc.curve.start]))])
        written.append(path)
    return written
