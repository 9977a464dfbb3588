"""Floating-point reference executor and momentum-SGD trainer.

Forward/evaluate run batch norm on running statistics (inference mode);
training uses batch statistics and maintains the running buffers.  All
activations are fp32 NCHW; convolutions go through the kernel backend.

The trainer is single-threaded and bit-reproducible: a fixed seed fixes the
shuffle order, the augmentation draws, and therefore the whole parameter
trajectory.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .errors import NumericError, ValidationError
from .graph import INPUT_ID, ModelGraph, topo_order

AUGMENT_MODES = ("aggressive_crop", "weak_crop", "none")


@dataclass
class TrainConfig:
    lr: float
    epochs: int
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0
    lr_decay_factor: float = 10.0
    lr_decay_epochs: tuple = ()
    augment: str = "none"
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0,1), got {self.momentum}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("epochs must be >= 0 and batch_size >= 1")
        if self.augment not in AUGMENT_MODES:
            raise ValidationError(f"augment must be one of {AUGMENT_MODES}")
        if self.lr_decay_factor <= 0:
            raise ValidationError("lr_decay_factor must be positive")

    def lr_at(self, epoch: int) -> float:
        decays = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr / (self.lr_decay_factor ** decays)


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int64
    class_count: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValidationError("inputs and labels differ in length")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.class_count):
            raise ValidationError("labels outside [0, class_count)")

    def __len__(self):
        return len(self.y)

    @property
    def samples(self):
        return list(zip(self.x, self.y))


@dataclass
class EvalResult:
    top1: float
    top5: Optional[float]
    n: int


def make_toy_dataset(seed: int, class_count: int = 10, per_class: int = 200,
                     image_size: int = 10, noise: float = 0.35):
    """Seeded synthetic image classification data.

    Each class is a low-resolution random pattern upsampled to the target
    size; samples are amplitude-jittered copies plus Gaussian pixel noise.
    Returns (train, eval) split 75/25 per class.
    """
    if class_count < 1 or per_class < 1 or image_size < 4:
        raise ValidationError("class_count, per_class and image_size must be positive (size >= 4)")
    rng = np.random.default_rng(seed)
    up = (np.arange(image_size) * 4) // image_size
    protos = rng.normal(0.0, 1.0, size=(class_count, 3, 4, 4))
    protos = protos[:, :, up][:, :, :, up]
    n_train = max(1, (per_class * 3) // 4)
    xs_tr, ys_tr, xs_ev, ys_ev = [], [], [], []
    for k in range(class_count):
        amp = rng.uniform(0.75, 1.25, size=per_class)
        eps = rng.normal(0.0, noise, size=(per_class, 3, image_size, image_size))
        xk = amp[:, None, None, None] * protos[k] + eps
        xs_tr.append(xk[:n_train])
        ys_tr.append(np.full(n_train, k, dtype=np.int64))
        xs_ev.append(xk[n_train:])
        ys_ev.append(np.full(per_class - n_train, k, dtype=np.int64))
    train = Dataset(np.concatenate(xs_tr).astype(np.float32), np.concatenate(ys_tr), class_count)
    evals = Dataset(np.concatenate(xs_ev).astype(np.float32), np.concatenate(ys_ev), class_count)
    return train, evals


def augment_batch(x: np.ndarray, mode: str, rng: np.random.Generator) -> np.ndarray:
    """Crop-jitter augmentation; ``aggressive_crop`` rescales a random-size
    crop back to full size (nearest neighbour), ``weak_crop`` jitters within
    a 1-pixel zero pad."""
    if mode == "none":
        return x
    n, _, s, _ = x.shape
    if mode == "weak_crop":
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        offs = rng.integers(0, 3, size=(n, 2))
        return np.stack([xp[i, :, oy:oy + s, ox:ox + s] for i, (oy, ox) in enumerate(offs)])
    if mode == "aggressive_crop":
        lo = max(2, int(math.ceil(0.7 * s)))
        sizes = rng.integers(lo, s + 1, size=n)
        out = np.empty_like(x)
        for i, sz in enumerate(sizes):
            oy = int(rng.integers(0, s - sz + 1))
            ox = int(rng.integers(0, s - sz + 1))
            crop = x[i, :, oy:oy + sz, ox:ox + sz]
            idx = (np.arange(s) * sz) // s
            out[i] = crop[:, idx][:, :, idx]
        return out
    raise ValidationError(f"unknown augmentation mode {mode!r}")


# --- layer primitives ------------------------------------------------------

def _conv_forward(x, w, b, stride, pad, groups):
    y = kernels.conv2d(x, w, stride, pad, groups)
    if b is not None:
        y = y + b[None, :, None, None]
    return y


def _bn_infer(x, bn):
    inv = 1.0 / np.sqrt(bn.var.astype(np.float64) + bn.eps)
    scale = (bn.gamma * inv).astype(np.float32)
    shift = (bn.beta - bn.gamma * bn.mean * inv).astype(np.float32)
    return x * scale[None, :, None, None] + shift[None, :, None, None]


def _bn_train_forward(x, gamma, beta, eps):
    mu = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    ivar = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * ivar[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, ivar, mu, var)


def _bn_train_backward(dy, cache, gamma):
    xhat, ivar, _, _ = cache
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dbeta = dy.sum(axis=(0, 2, 3))
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    k = (gamma * ivar / m)[None, :, None, None]
    dx = k * (m * dy - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
    return dx.astype(np.float32), dgamma.astype(np.float32), dbeta.astype(np.float32)


def _pool_windows(x, k, s):
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::s, ::s]


def _maxpool_forward(x, k, s):
    win = _pool_windows(x, k, s)
    n, c, oh, ow = win.shape[:4]
    flat = win.reshape(n, c, oh, ow, k * k)
    idx = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def _maxpool_backward(dy, idx, x_shape, k, s):
    n, c, h, w = x_shape
    oh, ow = dy.shape[2], dy.shape[3]
    dx = np.zeros(x_shape, dtype=np.float32)
    oy, ox = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    ky, kx = idx // k, idx % k
    rows = oy[None, None] * s + ky
    cols = ox[None, None] * s + kx
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ni, ci, rows, cols), dy)
    return dx


def _avgpool_forward(x, k, s):
    return _pool_windows(x, k, s).mean(axis=(-2, -1)).astype(np.float32)


def _avgpool_backward(dy, x_shape, k, s):
    dx = np.zeros(x_shape, dtype=np.float32)
    g = dy / (k * k)
    oh, ow = dy.shape[2], dy.shape[3]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + oh * s:s, j:j + ow * s:s] += g
    return dx


def _as_features(x):
    if x.ndim == 4:
        return x.reshape(x.shape[0], -1)
    return x


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy and its gradient wrt the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(len(labels)), labels]))
    p = _softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return loss, (p / len(labels)).astype(np.float32)


# --- forward / backward over the graph --------------------------------------

def _check_input(g, x):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(g.input_shape):
        raise ValidationError(f"input shape {x.shape} does not match graph input {g.input_shape}")
    return x


def _run_nodes(g, x, bn_mode, need_cache):
    """Execute all nodes; returns (outs, caches).  ``bn_mode`` is 'running'
    or 'batch'; caches are populated only when need_cache is true."""
    outs = {INPUT_ID: x}
    caches = {}
    for node in topo_order(g):
        ins = [outs[s] for s in node.input_ids]
        kind = node.kind
        if kind == "Conv2D":
            w = g.params[node.param_refs["weight"]]
            bname = node.param_refs.get("bias")
            b = g.params[bname] if bname else None
            y = _conv_forward(ins[0], w, b, node.attr("stride"), node.attr("padding"), node.attr("groups"))
            if need_cache:
                caches[node.id] = ("conv", ins[0])
        elif kind == "BatchNorm":
            bn = g.bn_params(node)
            if bn_mode == "running":
                y = _bn_infer(ins[0], bn)
                if need_cache:
                    raise ValidationError("running-stat BN has no training backward; use batch mode")
            else:
                y, cache = _bn_train_forward(ins[0], bn.gamma, bn.beta, bn.eps)
                if need_cache:
                    caches[node.id] = ("bn", cache)
        elif kind == "ReLU":
            y = np.maximum(ins[0], 0.0)
            if need_cache:
                caches[node.id] = ("relu", ins[0] > 0)
        elif kind == "Add":
            y = ins[0] + ins[1]
        elif kind == "MaxPool":
            k, s = node.attr("kernel"), node.attr("stride")
            y, idx = _maxpool_forward(ins[0], k, s)
            if need_cache:
                caches[node.id] = ("maxpool", (idx, ins[0].shape))
        elif kind == "AvgPool":
            k, s = node.attr("kernel"), node.attr("stride")
            y = _avgpool_forward(ins[0], k, s)
            if need_cache:
                caches[node.id] = ("avgpool", ins[0].shape)
        elif kind == "FullyConnected":
            feats = _as_features(ins[0])
            w = g.params[node.param_refs["weight"]]
            bname = node.param_refs.get("bias")
            y = feats @ w.T
            if bname:
                y = y + g.params[bname]
            if need_cache:
                caches[node.id] = ("fc", (feats, ins[0].shape))
        elif kind == "Softmax":
            y = _softmax(ins[0])
        else:
            raise ValidationError(f"{node.id}: unknown kind {kind!r}")
        outs[node.id] = y
    return outs, caches


def forward(g: ModelGraph, x: np.ndarray, sites=None):
    """Inference forward pass (running-stat BN).

    Returns (output, trace); the trace maps each requested site id (node id
    or '@input') to its activation tensor.
    """
    x = _check_input(g, x)
    outs, _ = _run_nodes(g, x, "running", need_cache=False)
    out = outs[g.output_id()]
    trace = {}
    if sites:
        for s in sites:
            if s not in outs:
                raise ValidationError(f"unknown trace site {s!r}")
            trace[s] = outs[s]
    return out, trace


def _backward(g, outs, caches, seed_grads):
    """Reverse pass from per-node seed gradients; returns parameter grads."""
    grads = {nid: gv.copy() for nid, gv in seed_grads.items()}
    pgrads = {}

    def _bump(name, val):
        pgrads[name] = pgrads.get(name, 0) + val

    for node in reversed(topo_order(g)):
        dy = grads.pop(node.id, None)
        if dy is None:
            continue
        kind = node.kind
        if kind == "Conv2D":
            _, x = caches[node.id]
            w = g.params[node.param_refs["weight"]]
            dx, dw = kernels.conv2d_backward(
                x, w, dy, node.attr("stride"), node.attr("padding"), node.attr("groups"))
            _bump(node.param_refs["weight"], dw)
            if node.param_refs.get("bias"):
                _bump(node.param_refs["bias"], dy.sum(axis=(0, 2, 3)))
            din = [dx]
        elif kind == "BatchNorm":
            bn = g.bn_params(node)
            _, cache = caches[node.id]
            dx, dgamma, dbeta = _bn_train_backward(dy, cache, bn.gamma)
            _bump(node.param_refs["gamma"], dgamma)
            _bump(node.param_refs["beta"], dbeta)
            din = [dx]
        elif kind == "ReLU":
            din = [dy * caches[node.id][1]]
        elif kind == "Add":
            din = [dy, dy]
        elif kind == "MaxPool":
            idx, xshape = caches[node.id][1]
            k, s = node.attr("kernel"), node.attr("stride")
            din = [_maxpool_backward(dy, idx, xshape, k, s)]
        elif kind == "AvgPool":
            xshape = caches[node.id][1]
            k, s = node.attr("kernel"), node.attr("stride")
            din = [_avgpool_backward(dy, xshape, k, s)]
        elif kind == "FullyConnected":
            feats, xshape = caches[node.id][1]
            w = g.params[node.param_refs["weight"]]
            _bump(node.param_refs["weight"], dy.T @ feats)
            if node.param_refs.get("bias"):
                _bump(node.param_refs["bias"], dy.sum(axis=0))
            din = [(dy @ w).reshape(xshape)]
        elif kind == "Softmax":
            raise ValidationError("Softmax backward is only supported fused with the loss")
        else:
            raise ValidationError(f"{node.id}: unknown kind {kind!r}")
        for src, d in zip(node.input_ids, din):
            if src == INPUT_ID:
                continue
            grads[src] = grads.get(src, 0) + d
    return {k: np.asarray(v, dtype=np.float32) for k, v in pgrads.items()}


def _loss_seed(g, outs, labels):
    """Cross-entropy on the graph output; a trailing Softmax node is fused
    (the gradient is seeded at its logits input)."""
    out_id = g.output_id()
    out_node = g.node(out_id)
    if out_node.kind == "Softmax":
        logits_id = out_node.input_ids[0]
        loss, dlogits = softmax_xent(outs[logits_id], labels)
        return loss, {logits_id: dlogits}
    loss, dlogits = softmax_xent(outs[out_id], labels)
    return loss, {out_id: dlogits}


def _diagnose_nonfinite(g, outs):
    for node in topo_order(g):
        if not np.all(np.isfinite(outs[node.id])):
            return node.id
    return "<loss>"


def loss_and_grads(g: ModelGraph, x: np.ndarray, labels: np.ndarray):
    """Softmax cross-entropy loss and gradients for every trainable
    parameter (batch-stat BN, as used during training)."""
    x = _check_input(g, x)
    if len(x) == 0:
        raise ValidationError("empty batch")
    outs, caches = _run_nodes(g, x, "batch", need_cache=True)
    loss, seed = _loss_seed(g, outs, labels)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss; first bad site: {_diagnose_nonfinite(g, outs)}")
    return loss, _backward(g, outs, caches, seed)


TRAINABLE_ROLES = {
    "Conv2D": ("weight", "bias"),
    "FullyConnected": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta"),
}


def trainable_params(g: ModelGraph) -> list:
    names = []
    for node in g.nodes:
        for role in TRAINABLE_ROLES.get(node.kind, ()):
            name = node.param_refs.get(role)
            if name is not None:
                names.append(name)
    return names


def sgd_loop(g: ModelGraph, data: Dataset, cfg: TrainConfig, step_fn, mask=None) -> ModelGraph:
    """Momentum-SGD driver shared by fp training and QAT fine-tuning.

    ``step_fn(graph, xb, yb)`` returns (loss, grads); the update is
    v = momentum*v + grad; p -= lr*v.  A prune mask, when given, is
    re-applied to the weights after every step.
    """
    g = g.copy()
    rng = np.random.default_rng(cfg.seed)
    names = trainable_params(g)
    vel = {n: np.zeros_like(g.params[n]) for n in names}
    n = len(data)
    for epoch in range(cfg.epochs):
        lr = np.float32(cfg.lr_at(epoch))
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            xb = augment_batch(data.x[sel], cfg.augment, rng)
            loss, grads = step_fn(g, xb, data.y[sel])
            if not math.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch} (loss={loss})")
            for name in names:
                gr = grads.get(name)
                if gr is None:
                    continue
                v = vel[name]
                v *= np.float32(cfg.momentum)
                v += gr
                g.params[name] -= lr * v
            if mask is not None:
                for pname, keep in mask.masks.items():
                    g.params[pname] *= keep
    return g


def _fp_step(g, xb, yb):
    """One fp training step: loss/grads with batch-stat BN plus the running
    statistics update (momentum 0.1, biased variance)."""
    x = _check_input(g, xb)
    outs, caches = _run_nodes(g, x, "batch", need_cache=True)
    loss, seed = _loss_seed(g, outs, yb)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss; first bad site: {_diagnose_nonfinite(g, outs)}")
    grads = _backward(g, outs, caches, seed)
    for node in g.nodes:
        if node.kind == "BatchNorm" and node.id in caches:
            _, (_, _, mu, var) = caches[node.id]
            m = np.float32(0.1)
            rm = g.params[node.param_refs["mean"]]
            rv = g.params[node.param_refs["var"]]
            rm *= 1 - m
            rm += m * mu.astype(np.float32)
            rv *= 1 - m
            rv += m * var.astype(np.float32)
    return loss, grads


def train(g: ModelGraph, data: Dataset, cfg: TrainConfig, mask=None) -> ModelGraph:
    """Full-precision momentum-SGD training; returns a new graph."""
    return sgd_loop(g, data, cfg, _fp_step, mask=mask)


def evaluate(g: ModelGraph, data: Dataset, batch_size: int = 128) -> EvalResult:
    """Top-1 (and top-5 when class_count >= 5) accuracy on ``data``."""
    if len(data) == 0:
        raise ValidationError("empty evaluation set")
    return _evaluate_outputs(lambda xb: forward(g, xb)[0], data, batch_size)


def _evaluate_outputs(run, data: Dataset, batch_size: int = 128) -> EvalResult:
    hits1 = hits5 = 0
    want5 = data.class_count >= 5
    for start in range(0, len(data), batch_size):
        xb = data.x[start:start + batch_size]
        yb = data.y[start:start + batch_size]
        logits = run(xb)
        pred = logits.argmax(axis=1)
        hits1 += int((pred == yb).sum())
        if want5:
            order = np.argsort(-logits, axis=1, kind="stable")[:, :5]
            hits5 += int((order == yb[:, None]).any(axis=1).sum())
    n = len(data)
    return EvalResult(top1=hits1 / n, top5=(hits5 / n) if want5 else None, n=n)
