"""Graph quantization: BN folding, placement planning, integer execution.

Placement rules: every edge is annotated; edges feeding an Add are kept in
floating point (the branch-end rule), quantized edges sourced from a ReLU
are unsigned, everything else is signed.  The graph output is never
quantized (it has no consuming edge).

Integer execution: conv/FC nodes consume the quantized input edge directly
(integer accumulation, INT32 or saturating INT16, per-add clamp counted in
an overflow audit) and recover fp32 as acc * S_A * S_W,o + bias.  ReLU and
max-pool run on dequantized values, which is exactly equivalent to integer
execution; Add and avg-pool stay fp32 by design.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import kernels, nnexec
from .calib import CalibrationProfile, QuantParams, minmax_scale
from .errors import NumericError, ValidationError
from .graph import (INPUT_ID, LayerNode, ModelGraph, QuantSite, edge_key,
                    load_model, save_model, topo_order, validate)


@dataclass
class FoldedConv:
    w_hat: np.ndarray
    b_hat: np.ndarray
    s_w_hat: Optional[np.ndarray] = None  # per-channel folded weight scales


@dataclass
class OverflowAudit:
    saturated: int = 0
    total: int = 0

    def __add__(self, other):
        return OverflowAudit(self.saturated + other.saturated, self.total + other.total)


def fold_bn(w: np.ndarray, bias: Optional[np.ndarray], bn, s_w=None) -> FoldedConv:
    """Absorb batch-norm statistics into the preceding convolution.

    w_hat = gamma*w/sqrt(var+eps); b_hat = beta - gamma*mean/sqrt(var+eps)
    (plus the folded conv bias when present).  When per-channel weight
    scales are supplied the folded scales |gamma|*s_w/sqrt(var+eps) come
    back too; a negative gamma folds its sign into w_hat so scales stay
    positive.
    """
    o = w.shape[0]
    if bn.gamma.shape[0] != o:
        raise ValidationError(f"BN has {bn.gamma.shape[0]} channels, conv has {o}")
    denom_sq = bn.var.astype(np.float64) + bn.eps
    if np.any(denom_sq <= 0):
        raise NumericError("var + eps must be positive for folding")
    f = bn.gamma.astype(np.float64) / np.sqrt(denom_sq)
    w_hat = (w.astype(np.float64) * f.reshape((o,) + (1,) * (w.ndim - 1))).astype(np.float32)
    b_hat = bn.beta.astype(np.float64) - f * bn.mean.astype(np.float64)
    if bias is not None:
        b_hat = b_hat + f * bias.astype(np.float64)
    s_w_hat = None
    if s_w is not None:
        s_w_hat = np.abs(f) * np.asarray(s_w, dtype=np.float64)
        if np.any(s_w_hat <= 0):
            raise ValidationError("folded weight scales must stay positive (gamma == 0?)")
    return FoldedConv(w_hat=w_hat, b_hat=b_hat.astype(np.float32), s_w_hat=s_w_hat)


def fold_graph(g: ModelGraph, weight_scales: Optional[dict] = None):
    """Fold every BatchNorm into its producing convolution.

    Returns (folded graph, folded weight scales or None).  ``weight_scales``
    maps conv weight names to QuantParams in the unfolded model; the folded
    model's per-channel scales are computed once here (Eq.-style folding)
    rather than re-measured.
    """
    g2 = g.copy()
    g2.quant_sites = None
    folded_scales = {} if weight_scales is not None else None
    bn_nodes = [n for n in g2.nodes if n.kind == "BatchNorm"]
    for bn_node in bn_nodes:
        src_id = bn_node.input_ids[0]
        if src_id == INPUT_ID:
            raise ValidationError(f"{bn_node.id}: cannot fold BN applied to the graph input")
        conv = g2.node(src_id)
        if conv.kind != "Conv2D":
            raise ValidationError(f"{bn_node.id}: BN input {src_id!r} is not a Conv2D")
        if g2.consumers(conv.id) != [bn_node.id]:
            raise ValidationError(f"{bn_node.id}: conv {conv.id!r} has other consumers; cannot fold")
        wname = conv.param_refs["weight"]
        bname = conv.param_refs.get("bias")
        s_w = None
        if weight_scales is not None and wname in weight_scales:
            qp = weight_scales[wname]
            s_w = qp.scale_array() if isinstance(qp, QuantParams) else np.asarray(qp, dtype=np.float64)
        bn = g2.bn_params(bn_node)
        folded = fold_bn(g2.params[wname], g2.params.get(bname) if bname else None, bn, s_w=s_w)
        g2.params[wname] = folded.w_hat
        new_bias = bname or f"{conv.id}.bias"
        g2.params[new_bias] = folded.b_hat
        conv.param_refs["bias"] = new_bias
        if folded.s_w_hat is not None:
            folded_scales[wname] = QuantParams(
                scales=folded.s_w_hat, bitwidth=weight_scales[wname].bitwidth,
                signedness="signed", granularity="channel")
        for pname in bn_node.param_refs.values():
            g2.params.pop(pname, None)
        g2.nodes.remove(bn_node)
        for n in g2.nodes:
            n.input_ids = [conv.id if s == bn_node.id else s for s in n.input_ids]
    validate(g2)
    return g2, folded_scales


def plan_placement(g: ModelGraph, *, quantize_add_inputs: bool = False,
                   force_signed: bool = False) -> ModelGraph:
    """Annotate every edge with its quantization decision.

    ``quantize_add_inputs`` deliberately violates the branch-end rule (for
    ablation); ``force_signed`` disables unsigned quantization after ReLU
    (ditto).  The graph output has no edge and is therefore never
    quantized.
    """
    g2 = g.copy()
    kinds = {n.id: n.kind for n in g2.nodes}
    sites = []
    for src, dst in g2.edges():
        from_relu = src != INPUT_ID and kinds[src] == "ReLU"
        unsigned = from_relu and not force_signed
        signedness = "unsigned" if unsigned else "signed"
        reason = "after_relu_unsigned" if unsigned else "default_signed"
        quantize = True
        if kinds[dst] == "Add" and not quantize_add_inputs:
            quantize = False
            reason = "add_input_skipped"
        sites.append(QuantSite(edge=(src, dst), quantize=quantize,
                               signedness=signedness, reason=reason))
    g2.quant_sites = sites
    validate(g2)
    return g2


def quantize_tensor(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Symmetric quantization, rounding half away from zero, saturating at
    the representable range.  Channel-wise scales apply along axis 0."""
    x64 = np.asarray(x, dtype=np.float64)
    scales = p.scale_array()
    if p.granularity == "channel":
        if scales.shape[0] != x.shape[0]:
            raise ValidationError(
                f"channel scale count {scales.shape[0]} != leading dim {x.shape[0]}")
        scales = scales.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    q = np.sign(x64) * np.floor(np.abs(x64) / scales + 0.5)
    np.clip(q, p.qmin, p.qmax, out=q)
    return q.astype(np.int8 if p.signedness == "signed" else np.uint8)


def dequantize_tensor(q: np.ndarray, p: QuantParams) -> np.ndarray:
    """x_hat = q * scale (per channel where applicable), as fp32."""
    scales = p.scale_array()
    if p.granularity == "channel":
        scales = scales.reshape((q.shape[0],) + (1,) * (q.ndim - 1))
    return (q.astype(np.float64) * scales).astype(np.float32)


def fake_quant(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """quantize-then-dequantize; fp tensor carrying the quantization error."""
    return dequantize_tensor(quantize_tensor(x, p), p)


_ACCUM_BITS = {"int16": 16, "int32": 32}


def quantized_conv(a_int: np.ndarray, w_int: np.ndarray, s_a: float, s_w,
                   bias: Optional[np.ndarray], accum_mode: str = "int32",
                   stride: int = 1, pad: int = 0, groups: int = 1):
    """Bit-exact integer convolution; returns (fp32 output, OverflowAudit).

    Accumulates in the requested width with saturating adds; the fp output
    is acc * S_A * S_W,o + bias, computed in float64 and rounded once.
    INT32 accumulation must be exact: any saturation raises NumericError.
    """
    if accum_mode not in _ACCUM_BITS:
        raise ValidationError(f"accum_mode must be int16|int32, got {accum_mode!r}")
    acc, sat, total = kernels.quantized_conv2d(
        a_int.astype(np.int32, copy=False), w_int.astype(np.int32, copy=False),
        stride, pad, groups, _ACCUM_BITS[accum_mode])
    if accum_mode == "int32" and sat:
        raise NumericError(f"INT32 accumulation saturated {sat} times; kernel too large")
    s = float(s_a) * np.atleast_1d(np.asarray(s_w, dtype=np.float64))
    out = acc.astype(np.float64) * s.reshape(1, -1, 1, 1)
    if bias is not None:
        out += bias.astype(np.float64).reshape(1, -1, 1, 1)
    return out.astype(np.float32), OverflowAudit(saturated=sat, total=total)


@dataclass
class QuantizedModel:
    """Folded graph with integer weights and per-site activation params."""

    graph: ModelGraph  # params hold int8 weights + fp32 biases
    weight_params: dict  # weight name -> QuantParams
    act_params: dict  # edge key -> QuantParams
    accum_mode: str = "int32"
    weight_bits: int = 8
    granularity: str = "channel"
    fp_layers: tuple = ()  # node ids opted out of quantization

    def site(self, src: str, dst: str) -> Optional[QuantParams]:
        return self.act_params.get(edge_key(src, dst))


def check_accum_mode(accum_mode: str, act_bits: int, weight_bits: int) -> None:
    """INT16 accumulation is only allowed when act+weight bits <= 14."""
    if accum_mode not in _ACCUM_BITS:
        raise ValidationError(f"accum_mode must be int16|int32, got {accum_mode!r}")
    if accum_mode == "int16" and act_bits + weight_bits > 14:
        raise ValidationError(
            f"INT16 accumulation needs act_bits + weight_bits <= 14, got {act_bits}+{weight_bits}")


def build_quantized(g: ModelGraph, profile: CalibrationProfile, *,
                    weight_bits: int = 8, granularity: str = "channel",
                    accum_mode: str = "int32", frozen_weight_scales: Optional[dict] = None,
                    fp_layers=()) -> QuantizedModel:
    """Quantize a folded, placement-annotated graph.

    Weights get MinMax scales (channel-wise by default) unless frozen scales
    are supplied (the QAT deployment path).  Every planned activation site
    must be covered by the calibration profile.
    """
    if any(n.kind == "BatchNorm" for n in g.nodes):
        raise ValidationError("fold batch norm before quantizing (fold_graph)")
    if g.quant_sites is None:
        raise ValidationError("graph has no placement plan")
    check_accum_mode(accum_mode, profile.bitwidth, weight_bits)
    g2 = g.copy()
    fp_layers = tuple(fp_layers)
    act_params = {}
    for site in g2.quant_sites:
        if not site.quantize:
            continue
        if site.key not in profile:
            raise ValidationError(f"calibration profile is missing site {site.key!r}")
        act_params[site.key] = profile.params_for(site.key)
    weight_params = {}
    for node in g2.nodes:
        if node.kind not in ("Conv2D", "FullyConnected") or node.id in fp_layers:
            continue
        wname = node.param_refs["weight"]
        w = g2.params[wname]
        if frozen_weight_scales is not None and wname in frozen_weight_scales:
            qp = frozen_weight_scales[wname]
            if qp.bitwidth != weight_bits:
                raise ValidationError(f"frozen scale bitwidth {qp.bitwidth} != {weight_bits}")
        else:
            qp = minmax_scale(w, weight_bits, granularity)
        g2.params[wname] = quantize_tensor(w, qp)
        weight_params[wname] = qp
    return QuantizedModel(graph=g2, weight_params=weight_params, act_params=act_params,
                          accum_mode=accum_mode, weight_bits=weight_bits,
                          granularity=granularity, fp_layers=fp_layers)


def _conv_geometry(node):
    return int(node.attr("stride")), int(node.attr("padding")), int(node.attr("groups"))


def run_quantized(qm: QuantizedModel, x: np.ndarray):
    """Execute the quantized model; returns (output, per-layer audits).

    Conv/FC with a quantized input edge run on the integer path; other
    consumers of quantized edges see quantize->dequantize values (integer
    storage semantics).  Add always executes in fp32.
    """
    g = qm.graph
    x = nnexec._check_input(g, x)
    outs = {INPUT_ID: x}
    audits = {}
    for node in topo_order(g):
        kind = node.kind
        if kind in ("Conv2D", "FullyConnected"):
            y, audit = _integer_layer(qm, node, outs)
            if audit is not None:
                audits[node.id] = audits.get(node.id, OverflowAudit()) + audit
        elif kind == "Add":
            a = _edge_value(qm, node.input_ids[0], node.id, outs)
            b = _edge_value(qm, node.input_ids[1], node.id, outs)
            y = a + b
        elif kind == "ReLU":
            y = np.maximum(_edge_value(qm, node.input_ids[0], node.id, outs), 0.0)
        elif kind == "MaxPool":
            v = _edge_value(qm, node.input_ids[0], node.id, outs)
            y, _ = nnexec._maxpool_forward(v, node.attr("kernel"), node.attr("stride"))
        elif kind == "AvgPool":
            v = _edge_value(qm, node.input_ids[0], node.id, outs)
            y = nnexec._avgpool_forward(v, node.attr("kernel"), node.attr("stride"))
        elif kind == "Softmax":
            y = nnexec._softmax(_edge_value(qm, node.input_ids[0], node.id, outs))
        else:
            raise ValidationError(f"{node.id}: kind {kind!r} not executable in quantized mode")
        outs[node.id] = y
    return outs[g.output_id()], audits


def _edge_value(qm, src, dst, outs):
    """Value seen by ``dst`` on this edge: fake-quantized when annotated."""
    v = outs[src]
    qp = qm.site(src, dst)
    if qp is None or dst in qm.fp_layers:
        return v
    return fake_quant(v, qp)


def _integer_layer(qm, node, outs):
    g = qm.graph
    src = node.input_ids[0]
    a_fp = outs[src]
    wname = node.param_refs["weight"]
    bname = node.param_refs.get("bias")
    bias = g.params[bname] if bname else None
    is_fc = node.kind == "FullyConnected"
    stride, pad, groups = (1, 0, 1) if is_fc else _conv_geometry(node)
    if node.id in qm.fp_layers:
        w = g.params[wname]
        return _fp_layer(a_fp, w, bias, is_fc, stride, pad, groups), None
    w_int = g.params[wname]
    w_qp = qm.weight_params[wname]
    a_qp = qm.site(src, node.id)
    if a_qp is None:
        w_hat = dequantize_tensor(w_int, w_qp)
        return _fp_layer(a_fp, w_hat, bias, is_fc, stride, pad, groups), None
    a_int = quantize_tensor(a_fp, a_qp)
    a4 = a_int.reshape(a_int.shape[0], -1, 1, 1) if is_fc else a_int
    w4 = w_int.reshape(w_int.shape + (1, 1)) if is_fc else w_int
    y, audit = quantized_conv(a4, w4, float(np.asarray(a_qp.scales)), w_qp.scales,
                              bias, qm.accum_mode, stride, pad, groups)
    if is_fc:
        y = y.reshape(y.shape[0], y.shape[1])
    return y, audit


def _fp_layer(a_fp, w, bias, is_fc, stride, pad, groups):
    if is_fc:
        feats = nnexec._as_features(a_fp)
        y = feats @ w.T
        return y + bias if bias is not None else y
    return nnexec._conv_forward(a_fp, w, bias, stride, pad, groups)


def evaluate_quantized(qm: QuantizedModel, data: nnexec.Dataset, batch_size: int = 128):
    """Accuracy of the integer model plus the merged overflow audit."""
    merged = {}

    def run(xb):
        out, audits = run_quantized(qm, xb)
        for k, v in audits.items():
            merged[k] = merged.get(k, OverflowAudit()) + v
        return out

    result = nnexec._evaluate_outputs(run, data, batch_size)
    return result, merged


def total_audit(audits: dict) -> OverflowAudit:
    out = OverflowAudit()
    for v in audits.values():
        out = out + v
    return out


# --- serialization -----------------------------------------------------------

def _params_doc(qp: QuantParams) -> dict:
    scales = qp.scale_array()
    return {
        "scales": [float(s) for s in scales] if qp.granularity == "channel" else float(scales[0]),
        "bitwidth": qp.bitwidth,
        "signedness": qp.signedness,
        "granularity": qp.granularity,
    }


def _params_from_doc(doc: dict) -> QuantParams:
    scales = doc["scales"]
    if doc["granularity"] == "channel":
        scales = np.asarray(scales, dtype=np.float64)
    return QuantParams(scales=scales, bitwidth=doc["bitwidth"],
                       signedness=doc["signedness"], granularity=doc["granularity"])


def save_quantized(qm: QuantizedModel, out_dir) -> str:
    extra = {
        "quantization": {
            "accum_mode": qm.accum_mode,
            "weight_bits": qm.weight_bits,
            "granularity": qm.granularity,
            "fp_layers": list(qm.fp_layers),
            "weight_params": {k: _params_doc(v) for k, v in sorted(qm.weight_params.items())},
            "act_params": {k: _params_doc(v) for k, v in sorted(qm.act_params.items())},
        }
    }
    return save_model(qm.graph, out_dir, extra=extra)


def load_quantized(path) -> QuantizedModel:
    g = load_model(path)
    q = g.meta.get("quantization")
    if q is None:
        raise ValidationError("model has no quantization section")
    return QuantizedModel(
        graph=g,
        weight_params={k: _params_from_doc(v) for k, v in q["weight_params"].items()},
        act_params={k: _params_from_doc(v) for k, v in q["act_params"].items()},
        accum_mode=q["accum_mode"],
        weight_bits=q["weight_bits"],
        granularity=q["granularity"],
        fp_layers=tuple(q.get("fp_layers", ())),
    )


def audit_report(audits: dict) -> dict:
    tot = total_audit(audits)
    return {
        "per_layer": {k: {"saturated": v.saturated, "total": v.total}
                      for k, v in sorted(audits.items())},
        "total": {"saturated": tot.saturated, "total": tot.total},
    }
