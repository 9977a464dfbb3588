"""Toy architecture fixtures.

Two small networks exercise the structures the quantization rules care
about: a residual net with bottleneck blocks (element-wise Add shortcuts)
and a depthwise-separable net.  Both are sized for single-core desk-scale
training.
"""

from __future__ import annotations

import numpy as np

from .graph import LayerNode, ModelGraph, INPUT_ID, validate


def _he_conv(rng, o, i, kh, kw):
    std = np.sqrt(2.0 / (i * kh * kw))
    return rng.normal(0.0, std, size=(o, i, kh, kw)).astype(np.float32)


def _he_fc(rng, o, i):
    std = np.sqrt(2.0 / i)
    return rng.normal(0.0, std, size=(o, i)).astype(np.float32)


class _Builder:
    def __init__(self, name, input_shape):
        self.g = ModelGraph(name=name, input_shape=tuple(input_shape), nodes=[], params={})
        self.head = INPUT_ID

    def _add(self, node, out=True):
        self.g.nodes.append(node)
        if out:
            self.head = node.id
        return node.id

    def conv(self, nid, rng, cin, cout, k, *, stride=1, pad=0, groups=1, src=None):
        w = _he_conv(rng, cout, cin // groups, k, k)
        self.g.params[f"{nid}.weight"] = w
        self._add(LayerNode(nid, "Conv2D",
                            attrs={"stride": stride, "padding": pad, "groups": groups},
                            param_refs={"weight": f"{nid}.weight"},
                            input_ids=[src or self.head]))
        return nid

    def bn(self, nid, channels, src=None):
        p = self.g.params
        p[f"{nid}.gamma"] = np.ones(channels, dtype=np.float32)
        p[f"{nid}.beta"] = np.zeros(channels, dtype=np.float32)
        p[f"{nid}.mean"] = np.zeros(channels, dtype=np.float32)
        p[f"{nid}.var"] = np.ones(channels, dtype=np.float32)
        self._add(LayerNode(nid, "BatchNorm", attrs={"eps": 1e-5},
                            param_refs={"gamma": f"{nid}.gamma", "beta": f"{nid}.beta",
                                        "mean": f"{nid}.mean", "var": f"{nid}.var"},
                            input_ids=[src or self.head]))
        return nid

    def relu(self, nid, src=None):
        self._add(LayerNode(nid, "ReLU", input_ids=[src or self.head]))
        return nid

    def add(self, nid, a, b):
        self._add(LayerNode(nid, "Add", input_ids=[a, b]))
        return nid

    def pool(self, nid, kind, kernel, src=None):
        self._add(LayerNode(nid, kind, attrs={"kernel": kernel, "stride": kernel},
                            input_ids=[src or self.head]))
        return nid

    def fc(self, nid, rng, cin, cout, src=None):
        self.g.params[f"{nid}.weight"] = _he_fc(rng, cout, cin)
        self.g.params[f"{nid}.bias"] = np.zeros(cout, dtype=np.float32)
        self._add(LayerNode(nid, "FullyConnected",
                            param_refs={"weight": f"{nid}.weight", "bias": f"{nid}.bias"},
                            input_ids=[src or self.head]))
        return nid


def build_toy_resnet(input_shape=(3, 10, 10), classes=10, width=12, bottleneck=6,
                     blocks=3, seed=0) -> ModelGraph:
    """Residual net: stem conv + ``blocks`` bottleneck blocks (1x1 -> 3x3 ->
    1x1, identity shortcut, fp Add) + maxpool + global avgpool + FC."""
    rng = np.random.default_rng(seed)
    b = _Builder("toy_resnet", input_shape)
    c, h, w = input_shape
    b.conv("stem.conv", rng, c, width, 3, pad=1)
    b.bn("stem.bn", width)
    b.relu("stem.relu")
    for i in range(1, blocks + 1):
        skip = b.head
        b.conv(f"block{i}.conv1", rng, width, bottleneck, 1)
        b.bn(f"block{i}.bn1", bottleneck)
        b.relu(f"block{i}.relu1")
        b.conv(f"block{i}.conv2", rng, bottleneck, bottleneck, 3, pad=1)
        b.bn(f"block{i}.bn2", bottleneck)
        b.relu(f"block{i}.relu2")
        b.conv(f"block{i}.conv3", rng, bottleneck, width, 1)
        b.bn(f"block{i}.bn3", width)
        b.add(f"block{i}.add", b.head, skip)
        b.relu(f"block{i}.relu")
    b.pool("head.maxpool", "MaxPool", 2)
    b.pool("head.avgpool", "AvgPool", h // 2)
    b.fc("head.fc", rng, width, classes)
    validate(b.g)
    return b.g


def build_toy_mobilenet(input_shape=(3, 10, 10), classes=10, width=12,
                        blocks=3, seed=0) -> ModelGraph:
    """Depthwise-separable net: stem conv + ``blocks`` (depthwise 3x3 +
    pointwise 1x1) blocks + global avgpool + FC."""
    rng = np.random.default_rng(seed)
    b = _Builder("toy_mobilenet", input_shape)
    c, h, w = input_shape
    b.conv("stem.conv", rng, c, width, 3, pad=1)
    b.bn("stem.bn", width)
    b.relu("stem.relu")
    for i in range(1, blocks + 1):
        b.conv(f"block{i}.dw", rng, width, width, 3, pad=1, groups=width)
        b.bn(f"block{i}.bn1", width)
        b.relu(f"block{i}.relu1")
        b.conv(f"block{i}.pw", rng, width, width, 1)
        b.bn(f"block{i}.bn2", width)
        b.relu(f"block{i}.relu2")
    b.pool("head.avgpool", "AvgPool", h)
    b.fc("head.fc", rng, width, classes)
    validate(b.g)
    return b.g


def build_residual_block(channels=4, size=6, seed=0) -> ModelGraph:
    """The 7-node residual fixture: conv-BN-ReLU x2 + Add + output ReLU."""
    rng = np.random.default_rng(seed)
    b = _Builder("residual_block", (channels, size, size))
    b.conv("conv1", rng, channels, channels, 3, pad=1)
    b.bn("bn1", channels)
    b.relu("relu1")
    b.conv("conv2", rng, channels, channels, 3, pad=1)
    b.bn("bn2", channels)
    b.add("add", b.head, INPUT_ID)
    b.relu("relu_out")
    validate(b.g)
    return b.g


ARCHITECTURES = {
    "toy_resnet": build_toy_resnet,
    "toy_mobilenet": build_toy_mobilenet,
}
