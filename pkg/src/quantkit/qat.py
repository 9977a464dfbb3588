"""Quantization-aware fine-tuning.

Forward passes run with batch norm folded into the convolutions (frozen
running statistics) and fake-quantization on weights and annotated
activation edges; gradients go back through the straight-through estimator
(identity inside the representable range, zero where the input saturated,
boundary inclusive) and unfold onto the conv weights and the BN scale and
shift separately.

Scales are frozen for the whole fine-tune: activation scales come from the
PTQ calibration profile, weight scales are per-channel MinMax of the
starting weights.  Because quantizing the folded weight with the folded
scale selects the same integer as quantizing the raw weight with the raw
scale, the folded deployment scales only need to be computed once, after
training.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels, nnexec
from .calib import CalibrationProfile, QuantParams, minmax_scale
from .errors import NumericError, ValidationError
from .graph import INPUT_ID, ModelGraph, edge_key, topo_order
from .quantize import fake_quant, fold_graph

__all__ = [
    "QATConfig", "QATResult", "fake_quant_forward", "ste_mask",
    "fake_quant_backward", "fold_forward_unfold_backward", "qat_finetune",
]


@dataclass
class QATConfig:
    epochs: int = 20
    lr: float = 5e-4
    decay_factor: float = 5.0
    decay_epoch: int = 10
    augment: str = "weak_crop"
    seed: int = 0
    batch_size: int = 32
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 0:
            raise ValidationError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValidationError("learning rate must be positive")

    def train_config(self) -> nnexec.TrainConfig:
        return nnexec.TrainConfig(
            lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
            momentum=self.momentum, seed=self.seed,
            lr_decay_factor=self.decay_factor, lr_decay_epochs=(self.decay_epoch,),
            augment=self.augment)


def fake_quant_forward(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """dequantize(quantize(x)): fp tensor carrying the quantization error."""
    return fake_quant(x, p)


def ste_mask(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """1 where x lies inside the representable pre-clamp range (inclusive
    bounds), 0 where the quantizer saturated."""
    scales = p.scale_array()
    if p.granularity == "channel":
        scales = scales.reshape((x.shape[0],) + (1,) * (x.ndim - 1))
    x64 = np.asarray(x, dtype=np.float64)
    return ((x64 >= p.qmin * scales) & (x64 <= p.qmax * scales)).astype(np.float32)


def fake_quant_backward(upstream: np.ndarray, x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Clipped straight-through estimator: pass upstream grad inside the
    representable range, zero outside."""
    return upstream * ste_mask(x, p)


def _fold_factors(bn):
    denom_sq = bn.var.astype(np.float64) + bn.eps
    if np.any(denom_sq <= 0):
        raise NumericError("var + eps must be positive for folding")
    inv = 1.0 / np.sqrt(denom_sq)
    return bn.gamma.astype(np.float64) * inv, inv


def _folded_conv_bn_forward(x, w, bias, bn, stride, pad, groups, weight_qp: Optional[QuantParams]):
    """Forward of conv+BN in folded form with optional weight fake-quant.

    weight_qp carries the frozen raw-weight scales; the fake-quant grid
    actually applied is the folded scale |f| * s_w.
    """
    f, inv = _fold_factors(bn)
    o = w.shape[0]
    w_hat = (w.astype(np.float64) * f.reshape((o,) + (1,) * (w.ndim - 1))).astype(np.float32)
    b_hat = bn.beta.astype(np.float64) - f * bn.mean.astype(np.float64)
    if bias is not None:
        b_hat = b_hat + f * bias.astype(np.float64)
    b_hat = b_hat.astype(np.float32)
    if weight_qp is not None:
        folded_qp = QuantParams(scales=np.abs(f) * weight_qp.scale_array(),
                                bitwidth=weight_qp.bitwidth, signedness="signed",
                                granularity="channel")
        w_used = fake_quant(w_hat, folded_qp)
        w_mask = ste_mask(w_hat, folded_qp)
    else:
        w_used = w_hat
        w_mask = None
    y = kernels.conv2d(x, w_used, stride, pad, groups) + b_hat[None, :, None, None]
    cache = (x, w, bias, w_used, w_mask, f, inv, bn, stride, pad, groups)
    return y, cache


def _folded_conv_bn_backward(dy, cache):
    x, w, bias, w_used, w_mask, f, inv, bn, stride, pad, groups = cache
    dx, dw_used = kernels.conv2d_backward(x, w_used, dy, stride, pad, groups)
    db_hat = dy.sum(axis=(0, 2, 3)).astype(np.float64)
    dw_hat = dw_used * w_mask if w_mask is not None else dw_used
    o = w.shape[0]
    fb = f.reshape((o,) + (1,) * (w.ndim - 1))
    dw = (dw_hat.astype(np.float64) * fb).astype(np.float32)
    # unfold: w_hat = f*w, b_hat = beta - f*mean (+ f*bias), f = gamma*inv
    dgamma = (dw_hat.astype(np.float64) * w.astype(np.float64)).sum(
        axis=tuple(range(1, w.ndim))) * inv
    shift = -bn.mean.astype(np.float64)
    if bias is not None:
        shift = shift + bias.astype(np.float64)
    dgamma = dgamma + db_hat * shift * inv
    dbeta = db_hat
    dbias = (f * db_hat).astype(np.float32) if bias is not None else None
    return dx, dw, dgamma.astype(np.float32), dbeta.astype(np.float32), dbias


def fold_forward_unfold_backward(w, bias, bn, x, dy, *, weight_qp: Optional[QuantParams] = None,
                                 stride: int = 1, pad: int = 0, groups: int = 1):
    """One folded conv+BN unit: forward with running stats (and optional
    weight fake-quant), backward unfolding onto (W, gamma, beta).

    Returns (y, dW, dgamma, dbeta) for the provided upstream gradient."""
    y, cache = _folded_conv_bn_forward(x, w, bias, bn, stride, pad, groups, weight_qp)
    _, dw, dgamma, dbeta, _ = _folded_conv_bn_backward(dy, cache)
    return y, dw, dgamma, dbeta


@dataclass
class QATResult:
    graph: ModelGraph  # fine-tuned fp masters (unfolded, BN intact)
    weight_scales: dict  # weight name -> frozen QuantParams (raw weights)
    profile: CalibrationProfile


def frozen_weight_scales(g: ModelGraph, weight_bits: int) -> dict:
    """Per-channel MinMax scales of the current conv/FC weights."""
    out = {}
    for node in g.nodes:
        if node.kind in ("Conv2D", "FullyConnected"):
            wname = node.param_refs["weight"]
            out[wname] = minmax_scale(g.params[wname], weight_bits, "channel")
    return out


def _build_exec_plan(g: ModelGraph):
    """Folded execution structure over the unfolded master graph.

    Returns (ordered unit list, folded_graph); each unit is (kind, folded
    node, original conv node or None, original bn node or None)."""
    folded, _ = fold_graph(g)
    bn_of_conv = {}
    for n in g.nodes:
        if n.kind == "BatchNorm":
            bn_of_conv[n.input_ids[0]] = n
    units = []
    for node in topo_order(folded):
        if node.kind == "Conv2D":
            conv = g.node(node.id)
            units.append(("conv", node, conv, bn_of_conv.get(node.id)))
        elif node.kind == "FullyConnected":
            units.append(("fc", node, g.node(node.id), None))
        else:
            units.append(("op", node, None, None))
    return units, folded


def qat_finetune(g: ModelGraph, profile: CalibrationProfile, data: nnexec.Dataset,
                 cfg: QATConfig, *, weight_bits: Optional[int] = None, mask=None,
                 quantizers_enabled: bool = True) -> QATResult:
    """Fine-tune fp masters with quantization simulated in the forward pass.

    Requires the PTQ profile (activation scales, frozen); weight scales are
    frozen per-channel MinMax of the starting weights at ``weight_bits``
    (defaults to the profile bitwidth).  Returns updated fp masters; the
    deployable integer model comes from quantize.build_quantized with the
    frozen scales folded once.
    """
    if profile is None:
        raise ValidationError("QAT requires a PTQ calibration profile (pipeline order)")
    if weight_bits is None:
        weight_bits = profile.bitwidth
    wscales = frozen_weight_scales(g, weight_bits) if quantizers_enabled else {}
    units, _ = _build_exec_plan(g)
    act_params = {k: sc.params for k, sc in profile.sites.items()} if quantizers_enabled else {}

    def step_fn(gg, xb, yb):
        return _qat_step(gg, units, act_params, wscales, xb, yb, quantizers_enabled)

    trained = nnexec.sgd_loop(g, data, cfg.train_config(), step_fn, mask=mask)
    return QATResult(graph=trained, weight_scales=wscales, profile=profile)


def _edge_input(outs, src, dst, act_params, edge_masks):
    v = outs[src]
    qp = act_params.get(edge_key(src, dst))
    if qp is None:
        return v
    edge_masks[(src, dst)] = ste_mask(v, qp)
    return fake_quant(v, qp)


def _qat_step(g, units, act_params, wscales, xb, yb, enabled):
    x = nnexec._check_input(g, xb)
    outs = {INPUT_ID: x}
    caches = {}
    edge_masks = {}
    for kind, node, conv, bn_node in units:
        ins = [_edge_input(outs, s, node.id, act_params, edge_masks) for s in node.input_ids]
        if kind == "conv":
            wname = conv.param_refs["weight"]
            bname = conv.param_refs.get("bias")
            w = g.params[wname]
            bias = g.params[bname] if bname else None
            qp = wscales.get(wname) if enabled else None
            if bn_node is not None:
                bn = g.bn_params(bn_node)
                y, cache = _folded_conv_bn_forward(
                    ins[0], w, bias, bn,
                    conv.attr("stride"), conv.attr("padding"), conv.attr("groups"), qp)
                caches[node.id] = ("conv_bn", cache, conv, bn_node)
            else:
                w_used = fake_quant(w, qp) if qp is not None else w
                w_mask = ste_mask(w, qp) if qp is not None else None
                y = nnexec._conv_forward(ins[0], w_used, bias,
                                         conv.attr("stride"), conv.attr("padding"),
                                         conv.attr("groups"))
                caches[node.id] = ("conv", (ins[0], w_used, w_mask), conv)
        elif kind == "fc":
            wname = conv.param_refs["weight"]
            bname = conv.param_refs.get("bias")
            w = g.params[wname]
            qp = wscales.get(wname) if enabled else None
            w_used = fake_quant(w, qp) if qp is not None else w
            w_mask = ste_mask(w, qp) if qp is not None else None
            feats = nnexec._as_features(ins[0])
            y = feats @ w_used.T
            if bname:
                y = y + g.params[bname]
            caches[node.id] = ("fc", (feats, ins[0].shape, w_used, w_mask), conv)
        else:
            y, cache = _plain_op_forward(node, ins)
            caches[node.id] = ("op", cache, node)
        outs[node.id] = y

    out_id = units[-1][1].id
    loss, dlogits = nnexec.softmax_xent(outs[out_id], yb)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss during QAT fine-tuning")
    grads = {out_id: dlogits}
    pgrads = {}

    def bump(name, val):
        pgrads[name] = pgrads.get(name, 0) + val

    for kind, node, conv, bn_node in reversed(units):
        dy = grads.pop(node.id, None)
        if dy is None:
            continue
        tag = caches[node.id][0]
        if tag == "conv_bn":
            _, cache, conv, bn_node = caches[node.id]
            dx, dw, dgamma, dbeta, dbias = _folded_conv_bn_backward(dy, cache)
            bump(conv.param_refs["weight"], dw)
            bump(bn_node.param_refs["gamma"], dgamma)
            bump(bn_node.param_refs["beta"], dbeta)
            if dbias is not None:
                bump(conv.param_refs["bias"], dbias)
            din = [dx]
        elif tag == "conv":
            _, (xin, w_used, w_mask), conv = caches[node.id]
            dx, dw_used = kernels.conv2d_backward(
                xin, w_used, dy, conv.attr("stride"), conv.attr("padding"), conv.attr("groups"))
            bump(conv.param_refs["weight"], dw_used * w_mask if w_mask is not None else dw_used)
            if conv.param_refs.get("bias"):
                bump(conv.param_refs["bias"], dy.sum(axis=(0, 2, 3)))
            din = [dx]
        elif tag == "fc":
            _, (feats, xshape, w_used, w_mask), conv = caches[node.id]
            dw_used = dy.T @ feats
            bump(conv.param_refs["weight"], dw_used * w_mask if w_mask is not None else dw_used)
            if conv.param_refs.get("bias"):
                bump(conv.param_refs["bias"], dy.sum(axis=0))
            din = [(dy @ w_used).reshape(xshape)]
        else:
            din = _plain_op_backward(node, caches[node.id][1], dy)
        for src, d in zip(node.input_ids, din):
            if src == INPUT_ID:
                continue
            m = edge_masks.get((src, node.id))
            if m is not None:
                d = d * m
            grads[src] = grads.get(src, 0) + d
    return loss, {k: np.asarray(v, dtype=np.float32) for k, v in pgrads.items()}


def _plain_op_forward(node, ins):
    kind = node.kind
    if kind == "ReLU":
        return np.maximum(ins[0], 0.0), (ins[0] > 0)
    if kind == "Add":
        return ins[0] + ins[1], None
    if kind == "MaxPool":
        y, idx = nnexec._maxpool_forward(ins[0], node.attr("kernel"), node.attr("stride"))
        return y, (idx, ins[0].shape)
    if kind == "AvgPool":
        return nnexec._avgpool_forward(ins[0], node.attr("kernel"), node.attr("stride")), ins[0].shape
    raise ValidationError(f"{node.id}: kind {kind!r} not supported during QAT")


def _plain_op_backward(node, cache, dy):
    kind = node.kind
    if kind == "ReLU":
        return [dy * cache]
    if kind == "Add":
        return [dy, dy]
    if kind == "MaxPool":
        idx, xshape = cache
        return [nnexec._maxpool_backward(dy, idx, xshape, node.attr("kernel"), node.attr("stride"))]
    if kind == "AvgPool":
        return [nnexec._avgpool_backward(dy, cache, node.attr("kernel"), node.attr("stride"))]
    raise ValidationError(f"{node.id}: kind {kind!r} not supported during QAT")
