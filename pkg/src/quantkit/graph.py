"""Model intermediate representation: layer DAG, parameters, quant sites.

A graph is a list of single-output layer nodes wired by node ids.  The
reserved id ``@input`` denotes the graph input tensor; exactly one node may
remain unconsumed and is the graph output.  Activations are CHW per sample
(NCHW batched), conv weights OIHW, FC weights (out, in).

On disk a model is a directory::

    manifest.json        # name, input_shape, nodes, param_files, quant_sites
    params/<name>.qt     # one tensor blob per parameter
"""

from __future__ import annotations

import heapq
import json
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ValidationError
from .tensor import load_tensor, save_tensor, check_tensor

INPUT_ID = "@input"

KINDS = ("Conv2D", "BatchNorm", "ReLU", "Add", "AvgPool", "MaxPool", "FullyConnected", "Softmax")

_DEFAULT_ATTRS = {
    "Conv2D": {"stride": 1, "padding": 0, "groups": 1},
    "BatchNorm": {"eps": 1e-5},
    "AvgPool": {"kernel": 2, "stride": None},
    "MaxPool": {"kernel": 2, "stride": None},
}


@dataclass
class LayerNode:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    param_refs: dict = field(default_factory=dict)  # role -> parameter name
    input_ids: list = field(default_factory=list)

    def attr(self, name):
        if name in self.attrs:
            return self.attrs[name]
        val = _DEFAULT_ATTRS.get(self.kind, {}).get(name)
        if name == "stride" and self.kind in ("AvgPool", "MaxPool") and val is None:
            return self.attr("kernel")
        return val


@dataclass
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float

    def __post_init__(self):
        n = self.gamma.shape[0]
        if not (self.beta.shape == self.mean.shape == self.var.shape == (n,)):
            raise ValidationError("batch-norm parameter lengths differ")
        if self.eps <= 0:
            raise ValidationError(f"batch-norm eps must be positive, got {self.eps}")
        if np.any(self.var < 0):
            raise ValidationError("batch-norm variance must be non-negative")


@dataclass
class QuantSite:
    """Per-edge quantization annotation produced by the placement planner."""

    edge: tuple  # (producer id, consumer id)
    quantize: bool
    signedness: str  # "signed" | "unsigned"
    reason: str  # after_relu_unsigned | add_input_skipped | default_signed

    @property
    def key(self) -> str:
        return edge_key(*self.edge)


def edge_key(src: str, dst: str) -> str:
    return f"{src}->{dst}"


@dataclass
class ModelGraph:
    name: str
    input_shape: tuple  # (C, H, W)
    nodes: list
    params: dict  # name -> ndarray
    quant_sites: Optional[list] = None  # list[QuantSite]
    meta: dict = field(default_factory=dict)

    def node(self, node_id: str) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise ValidationError(f"no node with id {node_id!r}")

    def output_id(self) -> str:
        consumed = {src for n in self.nodes for src in n.input_ids}
        outs = [n.id for n in self.nodes if n.id not in consumed]
        if len(outs) != 1:
            raise ValidationError(f"graph must have exactly one output, found {outs}")
        return outs[0]

    def edges(self) -> list:
        """All (producer, consumer) pairs, including the input edge(s)."""
        return [(src, n.id) for n in self.nodes for src in n.input_ids]

    def consumers(self, node_id: str) -> list:
        return [n.id for n in self.nodes if node_id in n.input_ids]

    def bn_params(self, node: LayerNode) -> BNParams:
        refs = node.param_refs
        return BNParams(
            gamma=self.params[refs["gamma"]],
            beta=self.params[refs["beta"]],
            mean=self.params[refs["mean"]],
            var=self.params[refs["var"]],
            eps=float(node.attr("eps")),
        )

    def copy(self) -> "ModelGraph":
        """Structural copy; parameter arrays are copied too."""
        return ModelGraph(
            name=self.name,
            input_shape=tuple(self.input_shape),
            nodes=[replace(n, attrs=dict(n.attrs), param_refs=dict(n.param_refs),
                           input_ids=list(n.input_ids)) for n in self.nodes],
            params={k: v.copy() for k, v in self.params.items()},
            quant_sites=None if self.quant_sites is None else [replace(s) for s in self.quant_sites],
            meta=dict(self.meta),
        )


def topo_order(g: ModelGraph) -> list:
    """Topological order of nodes; ties broken by node id (lexicographic)."""
    indeg = {}
    consumers = {}
    for n in g.nodes:
        indeg[n.id] = sum(1 for s in n.input_ids if s != INPUT_ID)
        for s in n.input_ids:
            if s != INPUT_ID:
                consumers.setdefault(s, []).append(n.id)
    by_id = {n.id: n for n in g.nodes}
    ready = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(by_id[nid])
        for c in consumers.get(nid, ()):
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, c)
    if len(order) != len(g.nodes):
        raise ValidationError("graph contains a cycle")
    return order


def infer_shapes(g: ModelGraph) -> dict:
    """Per-node output shape (per-sample, batch dimension omitted).

    Raises ValidationError on any structural or parameter-shape mismatch;
    running it is the core of graph validation.
    """
    shapes = {INPUT_ID: tuple(g.input_shape)}
    for node in topo_order(g):
        ins = [shapes[s] for s in node.input_ids]
        shapes[node.id] = _node_out_shape(g, node, ins)
    return shapes


def _node_out_shape(g, node, ins):
    kind = node.kind
    if kind == "Add":
        if len(ins) != 2:
            raise ValidationError(f"{node.id}: Add needs exactly 2 inputs")
        if ins[0] != ins[1]:
            raise ValidationError(f"{node.id}: Add input shapes differ: {ins[0]} vs {ins[1]}")
        return ins[0]
    if len(ins) != 1:
        raise ValidationError(f"{node.id}: {kind} needs exactly 1 input, got {len(ins)}")
    shape = ins[0]
    if kind in ("ReLU", "Softmax"):
        return shape
    if kind == "Conv2D":
        if len(shape) != 3:
            raise ValidationError(f"{node.id}: Conv2D needs CHW input, got {shape}")
        w = _param(g, node, "weight")
        o, cg, kh, kw = w.shape
        groups = int(node.attr("groups"))
        if shape[0] != cg * groups or o % groups:
            raise ValidationError(
                f"{node.id}: weight {w.shape} with groups={groups} does not accept {shape[0]} channels")
        bias = node.param_refs.get("bias")
        if bias is not None and g.params[bias].shape != (o,):
            raise ValidationError(f"{node.id}: bias shape {g.params[bias].shape} != ({o},)")
        s, p = int(node.attr("stride")), int(node.attr("padding"))
        oh = (shape[1] + 2 * p - kh) // s + 1
        ow = (shape[2] + 2 * p - kw) // s + 1
        if oh <= 0 or ow <= 0:
            raise ValidationError(f"{node.id}: output collapsed to {(o, oh, ow)}")
        return (o, oh, ow)
    if kind == "BatchNorm":
        if len(shape) != 3:
            raise ValidationError(f"{node.id}: BatchNorm needs CHW input, got {shape}")
        bn = g.bn_params(node)
        if bn.gamma.shape[0] != shape[0]:
            raise ValidationError(
                f"{node.id}: BN has {bn.gamma.shape[0]} channels, input has {shape[0]}")
        return shape
    if kind in ("AvgPool", "MaxPool"):
        if len(shape) != 3:
            raise ValidationError(f"{node.id}: pooling needs CHW input, got {shape}")
        k, s = int(node.attr("kernel")), int(node.attr("stride"))
        if k > shape[1] or k > shape[2]:
            raise ValidationError(f"{node.id}: kernel {k} larger than input {shape[1:]}")
        return (shape[0], (shape[1] - k) // s + 1, (shape[2] - k) // s + 1)
    if kind == "FullyConnected":
        w = _param(g, node, "weight")
        feat = shape[0] if len(shape) == 1 else int(np.prod(shape))
        if len(shape) == 3 and shape[1:] != (1, 1):
            raise ValidationError(f"{node.id}: FC input must be (C,) or (C,1,1), got {shape}")
        if w.shape[1] != feat:
            raise ValidationError(f"{node.id}: FC weight {w.shape} does not accept {feat} features")
        bias = node.param_refs.get("bias")
        if bias is not None and g.params[bias].shape != (w.shape[0],):
            raise ValidationError(f"{node.id}: bias shape mismatch")
        return (w.shape[0],)
    raise ValidationError(f"{node.id}: unknown layer kind {kind!r}")


def _param(g, node, role):
    name = node.param_refs.get(role)
    if name is None:
        raise ValidationError(f"{node.id}: missing required parameter {role!r}")
    if name not in g.params:
        raise ValidationError(f"{node.id}: parameter {name!r} not present in graph")
    return g.params[name]


def validate(g: ModelGraph) -> None:
    """Check all structural invariants; raises ValidationError on failure."""
    if not g.nodes:
        raise ValidationError("graph has no nodes")
    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate node ids")
    if INPUT_ID in ids:
        raise ValidationError(f"{INPUT_ID} is reserved")
    known = set(ids) | {INPUT_ID}
    for n in g.nodes:
        if n.kind not in KINDS:
            raise ValidationError(f"{n.id}: unknown kind {n.kind!r}")
        for s in n.input_ids:
            if s not in known:
                raise ValidationError(f"{n.id}: unresolved input {s!r}")
    if not any(INPUT_ID in n.input_ids for n in g.nodes):
        raise ValidationError("no node consumes the graph input")
    if len(g.input_shape) != 3:
        raise ValidationError(f"input_shape must be (C,H,W), got {g.input_shape}")
    g.output_id()
    infer_shapes(g)  # also runs topo_order, catching cycles
    if g.quant_sites is not None:
        edges = set(g.edges())
        for site in g.quant_sites:
            if tuple(site.edge) not in edges:
                raise ValidationError(f"quant site on unknown edge {site.edge}")
            if site.signedness not in ("signed", "unsigned"):
                raise ValidationError(f"bad signedness {site.signedness!r}")


def save_model(g: ModelGraph, out_dir, extra: Optional[dict] = None) -> str:
    """Serialize graph to ``out_dir``; returns the manifest path."""
    validate(g)
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "params"), exist_ok=True)
    param_files = {}
    for name, arr in sorted(g.params.items()):
        if "/" in name or "\\" in name:
            raise ValidationError(f"parameter name {name!r} may not contain path separators")
        rel = os.path.join("params", f"{name}.qt")
        save_tensor(check_tensor(arr), os.path.join(out_dir, rel))
        param_files[name] = rel
    manifest = {
        "format": "quantkit-model",
        "version": 1,
        "name": g.name,
        "input_shape": list(g.input_shape),
        "nodes": [
            {"id": n.id, "kind": n.kind, "attrs": n.attrs,
             "params": n.param_refs, "inputs": n.input_ids}
            for n in g.nodes
        ],
        "param_files": param_files,
    }
    if g.quant_sites is not None:
        manifest["quant_sites"] = [
            {"edge": list(s.edge), "quantize": s.quantize,
             "signedness": s.signedness, "reason": s.reason}
            for s in g.quant_sites
        ]
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


_MANIFEST_KEYS = {"format", "version", "name", "input_shape", "nodes", "param_files", "quant_sites"}


def load_model(path) -> ModelGraph:
    """Load a model from a manifest path or its directory."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != "quantkit-model":
        raise ValidationError("not a quantkit model manifest")
    base = os.path.dirname(path)
    params = {}
    for name, rel in manifest["param_files"].items():
        params[name] = load_tensor(os.path.join(base, rel))
    nodes = [
        LayerNode(id=d["id"], kind=d["kind"], attrs=dict(d.get("attrs", {})),
                  param_refs=dict(d.get("params", {})), input_ids=list(d["inputs"]))
        for d in manifest["nodes"]
    ]
    sites = None
    if manifest.get("quant_sites") is not None:
        sites = [
            QuantSite(edge=tuple(d["edge"]), quantize=bool(d["quantize"]),
                      signedness=d["signedness"], reason=d["reason"])
            for d in manifest["quant_sites"]
        ]
    meta = {k: v for k, v in manifest.items() if k not in _MANIFEST_KEYS}
    g = ModelGraph(
        name=manifest.get("name", "model"),
        input_shape=tuple(manifest["input_shape"]),
        nodes=nodes,
        params=params,
        quant_sites=sites,
        meta=meta,
    )
    validate(g)
    return g


def graphs_isomorphic(a: ModelGraph, b: ModelGraph) -> bool:
    """Same topology, attrs and bit-identical parameters (id-preserving)."""
    if a.input_shape != b.input_shape or len(a.nodes) != len(b.nodes):
        return False
    bn = {n.id: n for n in b.nodes}
    for n in a.nodes:
        m = bn.get(n.id)
        if m is None or m.kind != n.kind or m.input_ids != n.input_ids:
            return False
        if {k: v for k, v in n.attrs.items()} != {k: v for k, v in m.attrs.items()}:
            return False
        if n.param_refs != m.param_refs:
            return False
    if set(a.params) != set(b.params):
        return False
    return all(
        a.params[k].dtype == b.params[k].dtype
        and a.params[k].shape == b.params[k].shape
        and a.params[k].tobytes() == b.params[k].tobytes()
        for k in a.params
    )
