"""Magnitude pruning and the four-stage pipeline.

Stages: M1 = pruned fp model; M2 = masked fp fine-tune; M3 = post-training
quantization of M2; M4 = masked QAT of M2 seeded by M3's calibration.  The
mask is global (one magnitude threshold across all conv/FC weights) and is
re-applied after every optimizer step, so sparsity is conserved exactly
through the whole pipeline; exact zeros quantize to integer zero for any
scale.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nnexec, qat, quantize
from .calib import CalibConfig, CalibrationProfile, calibrate
from .errors import ValidationError
from .graph import ModelGraph

PRUNABLE_KINDS = ("Conv2D", "FullyConnected")


def prunable_weights(g: ModelGraph) -> list:
    """Names of conv/FC weight tensors (biases and BN are never pruned)."""
    names = []
    for node in g.nodes:
        if node.kind in PRUNABLE_KINDS:
            names.append(node.param_refs["weight"])
    return sorted(set(names))


@dataclass
class PruneMask:
    masks: dict  # weight name -> float32 0/1 array
    sparsity: float

    def keep_count(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))

    def total_count(self) -> int:
        return int(sum(m.size for m in self.masks.values()))


def magnitude_prune(g: ModelGraph, sparsity: float):
    """Zero the ``floor(s*N)`` smallest-|w| weights across all conv/FC
    tensors (global threshold, ties broken by flat concatenation order).
    Returns (pruned graph, mask)."""
    if not 0.0 <= sparsity < 1.0:
        raise ValidationError(f"sparsity must be in [0, 1), got {sparsity}")
    names = prunable_weights(g)
    flats = [np.abs(g.params[n].ravel()) for n in names]
    all_mags = np.concatenate(flats) if flats else np.empty(0)
    k = int(np.floor(sparsity * all_mags.size))
    drop = np.zeros(all_mags.size, dtype=bool)
    if k > 0:
        order = np.argsort(all_mags, kind="stable")
        drop[order[:k]] = True
    masks = {}
    off = 0
    for n, f in zip(names, flats):
        sl = drop[off:off + f.size]
        masks[n] = (~sl).reshape(g.params[n].shape).astype(np.float32)
        off += f.size
    mask = PruneMask(masks=masks, sparsity=sparsity)
    return apply_mask(g, mask), mask


def apply_mask(g: ModelGraph, mask: PruneMask) -> ModelGraph:
    """Zero the masked positions; everything else untouched."""
    g2 = g.copy()
    for name, keep in mask.masks.items():
        if name not in g2.params:
            raise ValidationError(f"mask refers to unknown parameter {name!r}")
        if g2.params[name].shape != keep.shape:
            raise ValidationError(f"mask shape mismatch on {name!r}")
        g2.params[name] = g2.params[name] * keep
    return g2


def graph_nnz(g: ModelGraph, names=None) -> int:
    names = prunable_weights(g) if names is None else names
    return int(sum(int(np.count_nonzero(g.params[n])) for n in names))


@dataclass
class PipelineState:
    m1: ModelGraph
    m2: ModelGraph
    m3: quantize.QuantizedModel
    m4: quantize.QuantizedModel
    m4_graph: ModelGraph  # fp masters after QAT
    mask: PruneMask
    profile: CalibrationProfile
    stage: str = "M4"
    metrics: dict = field(default_factory=dict)


def run_pipeline(model: ModelGraph, sparsity: float, train_data: nnexec.Dataset,
                 eval_data: nnexec.Dataset, ft_cfg: nnexec.TrainConfig,
                 calib_cfg: CalibConfig, qat_cfg: qat.QATConfig, *,
                 weight_bits: int = 8, granularity: str = "channel",
                 accum_mode: str = "int32") -> PipelineState:
    """Sparsity -> fp fine-tune -> PTQ -> QAT, mask invariant throughout."""
    m1, mask = magnitude_prune(model, sparsity)
    m2 = nnexec.train(m1, train_data, ft_cfg, mask=mask)

    folded, _ = quantize.fold_graph(m2)
    planned = quantize.plan_placement(folded)
    profile = calibrate(planned, train_data, calib_cfg)
    m3 = quantize.build_quantized(planned, profile, weight_bits=weight_bits,
                                  granularity=granularity, accum_mode=accum_mode)

    result = qat.qat_finetune(m2, profile, train_data, qat_cfg,
                              weight_bits=weight_bits, mask=mask)
    m4_graph = result.graph
    folded4, folded_scales = quantize.fold_graph(m4_graph, result.weight_scales)
    planned4 = quantize.plan_placement(folded4)
    m4 = quantize.build_quantized(planned4, profile, weight_bits=weight_bits,
                                  granularity=granularity, accum_mode=accum_mode,
                                  frozen_weight_scales=folded_scales)

    names = prunable_weights(model)
    metrics = {}
    for stage, top, nnz in (
        ("M1", nnexec.evaluate(m1, eval_data), graph_nnz(m1, names)),
        ("M2", nnexec.evaluate(m2, eval_data), graph_nnz(m2, names)),
        ("M3", quantize.evaluate_quantized(m3, eval_data)[0], graph_nnz(m2, names)),
        ("M4", quantize.evaluate_quantized(m4, eval_data)[0], graph_nnz(m4_graph, names)),
    ):
        metrics[stage] = {"sparsity": sparsity, "top1": top.top1,
                          "top5": top.top5, "nnz": nnz}
    return PipelineState(m1=m1, m2=m2, m3=m3, m4=m4, m4_graph=m4_graph,
                         mask=mask, profile=profile, metrics=metrics)


def write_report(state: PipelineState, out_dir) -> dict:
    """Per-stage JSON + CSV report for one pipeline run."""
    os.makedirs(out_dir, exist_ok=True)
    doc = {"sparsity": state.mask.sparsity, "stages": state.metrics}
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "sparsity", "top1", "top5", "nnz"])
        for stage in ("M1", "M2", "M3", "M4"):
            m = state.metrics[stage]
            w.writerow([stage, m["sparsity"], m["top1"],
                        "" if m["top5"] is None else m["top5"], m["nnz"]])
    return doc


def write_sparsity_table(reports: list, path) -> None:
    """Combined table over sparsity levels: M2 and M4 accuracy columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sparsity", "m2_top1", "m2_top5", "m4_top1", "m4_top5", "nnz"])
        for doc in reports:
            m2, m4 = doc["stages"]["M2"], doc["stages"]["M4"]
            w.writerow([doc["sparsity"], m2["top1"],
                        "" if m2["top5"] is None else m2["top5"],
                        m4["top1"], "" if m4["top5"] is None else m4["top5"],
                        m4["nnz"]])
