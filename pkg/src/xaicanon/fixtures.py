"""Small hand-built networks (and one synthetic dataset) for exercising the toolkit.

Weights come from ``default_rng(seed).uniform(-0.5, 0.5)``; BatchNorm statistics
are drawn away from the identity (mean != 0, var != 1) so every fusion really
changes parameters.  ``bias_free=True`` zeroes every bias, BN mean and BN bias,
which makes the graph a positively homogeneous function (used for relevance
conservation checks).
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .dataio import Sample
from .graph import (
    ADD, AVGPOOL, BATCHNORM, CONCAT, CONV2D, FLATTEN, GLOBAL_AVGPOOL, INPUT, LINEAR, MAXPOOL, RELU,
    LayerNode, ModelGraph, check_graph,
)


class _Builder:
    def __init__(self, seed: int, bias_free: bool):
        self.rng = np.random.default_rng(seed)
        self.bias_free = bias_free
        self.nodes: list[LayerNode] = []

    def _add(self, node: LayerNode) -> str:
        self.nodes.append(node)
        return node.id

    def _u(self, *shape) -> np.ndarray:
        return self.rng.uniform(-0.5, 0.5, size=shape)

    def _bias(self, n: int) -> np.ndarray:
        b = self._u(n)
        return np.zeros(n) if self.bias_free else b

    def input(self, shape) -> str:
        return self._add(LayerNode("input", INPUT, attrs={"shape": list(shape)}))

    def conv(self, nid, src, cin, cout, k=3, pad=1, stride=1, group=None, pad_value=0.0) -> str:
        w = self._u(cout, cin, k, k)
        b = self._bias(cout)
        attrs = {"stride": [stride, stride], "pad": [pad] * 4, "pad_value": 0.0 if self.bias_free else pad_value}
        return self._add(LayerNode(nid, CONV2D, (src,), {"weight": w, "bias": b}, attrs, group))

    def linear(self, nid, src, nin, nout, group=None) -> str:
        return self._add(LayerNode(nid, LINEAR, (src,), {"weight": self._u(nout, nin), "bias": self._bias(nout)},
                                   group=group))

    def bn(self, nid, src, c, group=None, positive=False, params=None) -> str:
        if params is None:
            sign = np.ones(c) if positive else self.rng.choice([-1.0, 1.0], size=c)
            params = {
                "weight": sign * self.rng.uniform(0.5, 1.5, size=c),
                "mean": self.rng.uniform(0.05, 0.3, size=c) * self.rng.choice([-1.0, 1.0], size=c),
                "var": self.rng.uniform(0.3, 2.0, size=c),
                "bias": self.rng.uniform(-0.2, 0.2, size=c),
            }
            if positive:
                # Keep outputs of non-negative inputs non-negative.
                std = np.sqrt(params["var"] + 1e-5)
                params["bias"] = params["weight"] * np.abs(params["mean"]) / std + self.rng.uniform(0, 0.1, size=c)
            if self.bias_free:
                params["mean"] = np.zeros(c)
                params["bias"] = np.zeros(c)
        return self._add(LayerNode(nid, BATCHNORM, (src,), params, {"eps": 1e-5}, group))

    def op(self, nid, kind, *srcs, group=None, **attrs) -> str:
        return self._add(LayerNode(nid, kind, srcs, attrs=attrs, group=group))

    def graph(self, output: str) -> ModelGraph:
        return check_graph(ModelGraph({n.id: n for n in self.nodes}, "input", output))


def vgg_like(seed: int = 0, bias_free: bool = False) -> ModelGraph:
    """Conv -> BN -> ReLU chains with max pooling, then Linear -> BN -> ReLU -> Linear."""
    b = _Builder(seed, bias_free)
    x = b.input((3, 8, 8))
    x = b.conv("conv1", x, 3, 4, group="low")
    x = b.bn("bn1", x, 4, group="low")
    x = b.op("relu1", RELU, x, group="low")
    x = b.conv("conv2", x, 4, 6, group="mid")
    x = b.bn("bn2", x, 6, group="mid")
    x = b.op("relu2", RELU, x, group="mid")
    x = b.op("pool2", MAXPOOL, x, group="mid", kernel=[2, 2], stride=[2, 2])
    x = b.conv("conv3", x, 6, 8, group="high")
    x = b.bn("bn3", x, 8, group="high")
    x = b.op("relu3", RELU, x, group="high")
    x = b.op("pool3", MAXPOOL, x, group="high", kernel=[2, 2], stride=[2, 2])
    x = b.op("flatten", FLATTEN, x, group="classifier")
    x = b.linear("fc1", x, 32, 16, group="classifier")
    x = b.bn("bn4", x, 16, group="classifier")
    x = b.op("relu4", RELU, x, group="classifier")
    x = b.linear("fc2", x, 16, 5, group="classifier")
    return b.graph(x)


def resnet_like(seed: int = 0, bias_free: bool = False) -> ModelGraph:
    """Stem plus one residual block with an identity skip into an Add."""
    b = _Builder(seed, bias_free)
    x = b.input((3, 8, 8))
    x = b.conv("conv0", x, 3, 4, group="stem")
    x = b.bn("bn0", x, 4, group="stem")
    skip = b.op("relu0", RELU, x, group="stem")
    x = b.conv("conv1", skip, 4, 4, group="block")
    x = b.bn("bn1", x, 4, group="block")
    x = b.op("relu1", RELU, x, group="block")
    x = b.conv("conv2", x, 4, 4, group="block")
    x = b.bn("bn2", x, 4, group="block")
    x = b.op("add", ADD, skip, x, group="block")
    x = b.op("relu2", RELU, x, group="block")
    x = b.op("gap", GLOBAL_AVGPOOL, x, group="head")
    x = b.linear("fc", x, 4, 5, group="head")
    return b.graph(x)


def densenet_like(seed: int = 0, bias_free: bool = False) -> ModelGraph:
    """Two dense layers (Concat -> BN -> ReLU -> Conv) and a BN -> ReLU -> AvgPool -> Conv transition.

    The second dense conv pads with a non-zero constant, so folding its BN
    rescales the pad value as well as materializing a bias map.
    """
    b = _Builder(seed, bias_free)
    x = b.input((3, 8, 8))
    x = b.conv("conv0", x, 3, 4, group="stem")
    x = b.bn("bn0", x, 4, group="stem")
    f0 = b.op("relu0", RELU, x, group="stem")
    x = b.bn("bn1", f0, 4, group="dense")
    x = b.op("relu1", RELU, x, group="dense")
    f1 = b.conv("conv1", x, 4, 3, group="dense")
    cat1 = b.op("cat1", CONCAT, f0, f1, group="dense", widths=[4, 3])
    x = b.bn("bn2", cat1, 7, group="dense")
    x = b.op("relu2", RELU, x, group="dense")
    f2 = b.conv("conv2", x, 7, 3, group="dense", pad_value=0.25)
    cat2 = b.op("cat2", CONCAT, cat1, f2, group="dense", widths=[7, 3])
    x = b.bn("bn3", cat2, 10, group="transition")
    x = b.op("relu3", RELU, x, group="transition")
    x = b.op("pool3", AVGPOOL, x, group="transition", kernel=[2, 2], stride=[2, 2])
    x = b.conv("conv3", x, 10, 6, k=1, pad=0, group="transition")
    x = b.op("relu4", RELU, x, group="transition")
    x = b.op("gap", GLOBAL_AVGPOOL, x, group="head")
    x = b.linear("fc", x, 6, 5, group="head")
    return b.graph(x)


RN_WIDTHS = (24, 2, 24, 2, 128)


def rn_like(seed: int = 0, bias_free: bool = False) -> ModelGraph:
    """Two object encodings, two coordinate pairs and a question vector concatenated into one Linear.

    Both object encodings end in a BatchNorm (sharing the same statistics) that
    feeds the concatenation directly, giving the slice layout 24, 2, 24, 2, 128.
    BN statistics keep post-ReLU features non-negative.
    """
    b = _Builder(seed, bias_free)
    x = b.input((20,))
    h = b.linear("enc1", x, 20, 16, group="encoder")
    h = b.op("enc1_relu", RELU, h, group="encoder")
    h = b.bn("enc1_bn", h, 16, group="encoder", positive=True)
    h = b.linear("enc2", h, 16, 24, group="encoder")
    h = b.op("enc2_relu", RELU, h, group="encoder")
    obj1 = b.bn("obj1_bn", h, 24, group="encoder", positive=True)
    shared = {k: np.asarray(v) for k, v in b.nodes[-1].params.items()}
    g = b.linear("enc3", x, 20, 24, group="encoder")
    g = b.op("enc3_relu", RELU, g, group="encoder")
    obj2 = b.bn("obj2_bn", g, 24, group="encoder", params=shared)
    c1 = b.op("coord1_relu", RELU, b.linear("coord1", x, 20, 2, group="encoder"), group="encoder")
    c2 = b.op("coord2_relu", RELU, b.linear("coord2", x, 20, 2, group="encoder"), group="encoder")
    q = b.op("question_relu", RELU, b.linear("question", x, 20, 128, group="encoder"), group="encoder")
    cat = b.op("cat", CONCAT, obj1, c1, obj2, c2, q, group="relation", widths=list(RN_WIDTHS))
    r = b.linear("g1", cat, sum(RN_WIDTHS), 32, group="relation")
    r = b.op("g1_relu", RELU, r, group="relation")
    out = b.linear("f_out", r, 32, 4, group="relation")
    return b.graph(out)


def fanout_bn(seed: int = 0, bias_free: bool = False) -> ModelGraph:
    """A BN (after a ReLU) whose output feeds two convolutions; canonization must leave it alone."""
    b = _Builder(seed, bias_free)
    x = b.input((3, 8, 8))
    x = b.conv("conv0", x, 3, 4)
    x = b.op("relu0", RELU, x)
    shared = b.bn("bn_shared", x, 4)
    left = b.conv("conv_a", shared, 4, 4)
    right = b.conv("conv_b", shared, 4, 4)
    x = b.op("add", ADD, left, right)
    x = b.op("relu1", RELU, x)
    x = b.op("gap", GLOBAL_AVGPOOL, x)
    x = b.linear("fc", x, 4, 3)
    return b.graph(x)


CORNER_SIZE = 16
CORNER_SQUARE = 4


def corner_detector(seed: int = 0, bias_free: bool = False) -> ModelGraph:
    """Quadrant classifier with hand-set weights: class q wins when a bright square sits in quadrant q.

    Classes are quadrants in row-major order (top-left, top-right, bottom-left,
    bottom-right).  ``seed`` is accepted for a uniform builder signature.
    """
    nodes = [LayerNode("input", INPUT, attrs={"shape": [1, CORNER_SIZE, CORNER_SIZE]})]
    blur = np.full((3, 3), 1.0 / 9.0)
    centre = np.zeros((3, 3))
    centre[1, 1] = 1.0
    nodes.append(LayerNode("conv1", CONV2D, ("input",),
                           {"weight": np.stack([blur, centre])[:, None], "bias": np.array([0.0, -0.05])},
                           {"stride": [1, 1], "pad": [1, 1, 1, 1], "pad_value": 0.0}, "features"))
    bn = {"weight": np.array([1.5, -0.8]), "bias": np.array([-0.1, 0.6]),
          "mean": np.array([0.2, 0.6]), "var": np.array([0.3, 0.5])}
    if bias_free:
        nodes[-1] = nodes[-1].with_(params={"weight": nodes[-1].params["weight"], "bias": np.zeros(2)})
        bn.update(mean=np.zeros(2), bias=np.zeros(2))
    nodes.append(LayerNode("bn1", BATCHNORM, ("conv1",), bn, {"eps": 1e-5}, "features"))
    nodes.append(LayerNode("relu1", RELU, ("bn1",), group="features"))
    half = CORNER_SIZE // 2
    nodes.append(LayerNode("pool1", AVGPOOL, ("relu1",), attrs={"kernel": [half, half], "stride": [half, half]},
                           group="features"))
    nodes.append(LayerNode("flatten", FLATTEN, ("pool1",), group="classifier"))
    w = np.zeros((4, 8))
    w[:, :4] = -0.25
    for q in range(4):
        w[q, q] = 1.0        # channel 0 (blurred brightness) in quadrant q
        w[q, 4 + q] = -0.1   # channel 1 responds to darkness; a mild penalty keeps the winning logit positive
    nodes.append(LayerNode("fc", LINEAR, ("flatten",), {"weight": w, "bias": np.zeros(4)}, group="classifier"))
    return check_graph(ModelGraph({n.id: n for n in nodes}, "input", "fc"))


def corner_dataset(seed: int = 0, n: int = 20) -> list[Sample]:
    """``n`` noisy images, each with one bright square in quadrant ``i % 4`` and its mask."""
    rng = np.random.default_rng(seed)
    half = CORNER_SIZE // 2
    out = []
    for i in range(n):
        q = i % 4
        img = rng.uniform(0.0, 0.2, size=(1, CORNER_SIZE, CORNER_SIZE))
        r0 = (q // 2) * half + int(rng.integers(0, half - CORNER_SQUARE + 1))
        c0 = (q % 2) * half + int(rng.integers(0, half - CORNER_SQUARE + 1))
        img[0, r0:r0 + CORNER_SQUARE, c0:c0 + CORNER_SQUARE] = 1.0
        mask = np.zeros((CORNER_SIZE, CORNER_SIZE), dtype=bool)
        mask[r0:r0 + CORNER_SQUARE, c0:c0 + CORNER_SQUARE] = True
        out.append(Sample(f"s{i:02d}", img.astype(np.float32), q, mask))
    return out


BUILDERS: dict[str, Callable[..., ModelGraph]] = {
    "vgg_like": vgg_like,
    "resnet_like": resnet_like,
    "densenet_like": densenet_like,
    "rn_like": rn_like,
    "corner_detector": corner_detector,
    "fanout_bn": fanout_bn,
}

CANONIZABLE = ("vgg_like", "resnet_like", "densenet_like", "rn_like", "corner_detector")


def build(name: str, seed: int = 0, bias_free: bool = False) -> tuple[ModelGraph, Optional[list[Sample]]]:
    """Return ``(graph, dataset)``; only ``corner_detector`` comes with a dataset."""
    if name not in BUILDERS:
        raise KeyError(f"unknown fixture {name!r}; known: {sorted(BUILDERS)}")
    graph = BUILDERS[name](seed, bias_free)
    data = corner_dataset(seed) if name == "corner_detector" else None
    return graph, data
