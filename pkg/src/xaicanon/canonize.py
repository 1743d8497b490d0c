"""Function-preserving rewrites that remove BatchNorm nodes from a graph.

Four fusion primitives operate on single nodes; :func:`canonize_graph` matches
them against a graph in a fixed pass order:

``linear_bn``
    Linear/Conv2d -> BN, folded into the linear layer (output-channel scaling).
``bn_linear``
    BN -> Linear/Conv2d, folded into the linear layer (input-channel scaling).
    Padded convolutions receive a full bias map and, for non-zero padding, a
    rescaled per-channel pad value.
``bn_relu_linear``
    BN -> ReLU -> Linear/Conv2d.  The ReLU becomes a ThreshReLU placed before
    the BN, which is then folded forward.
``bn_relu_avgpool_linear``
    BN -> ReLU -> AvgPool -> Linear/Conv2d.  As above; the per-channel affine BN
    commutes exactly with average pooling.
``bn_concat_linear``
    BN -> Concat -> Linear.  Only the weight columns of the slices fed by the
    BN are rescaled.

A BN is only removed when its whole consumer path matches one pattern.  Anything
else (fan-out, max pooling, degenerate channels) is left in place and listed in
the :class:`FusionReport`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import DegenerateChannelError, DimensionError, ParameterError
from .graph import (
    AVGPOOL, BATCHNORM, CONCAT, CONV2D, LINEAR, LINEAR_KINDS, RELU, THRESH_RELU,
    LayerNode, ModelGraph, check_graph, concat_slices, forward, infer_shapes,
)
from .tensor import ACC, DEGENERACY_TOL, DTYPE, BatchNormParams, PadSpec

PASSES = ("linear_bn", "bn_linear", "bn_relu_linear", "bn_relu_avgpool_linear", "bn_concat_linear")


@dataclass
class Fusion:
    pass_name: str
    bn_id: str
    into_id: str


@dataclass
class FusionReport:
    passes: list[str]
    fusions: list[Fusion] = field(default_factory=list)
    thresh_inserted: int = 0
    bias_maps: int = 0
    untouched: list[tuple[str, str]] = field(default_factory=list)

    @property
    def removed(self) -> list[str]:
        return [f.bn_id for f in self.fusions]

    def to_dict(self) -> dict:
        return {
            "passes": list(self.passes),
            "fusions": [{"pass": f.pass_name, "removed_bn": f.bn_id, "absorbed_by": f.into_id} for f in self.fusions],
            "thresh_relu_inserted": self.thresh_inserted,
            "bias_maps_materialized": self.bias_maps,
            "untouched_bn": [{"id": i, "reason": r} for i, r in self.untouched],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


# ---- single-node fusions -----------------------------------------------------------

def _param(node: LayerNode, name: str, shape) -> np.ndarray:
    if name in node.params:
        return np.asarray(node.params[name], ACC)
    return np.zeros(shape, dtype=ACC)


def fuse_linear_then_bn(linear: LayerNode, bn: BatchNormParams) -> LayerNode:
    """Fold a BN that follows ``linear``: rows/output channels are scaled by ``w_BN/sqrt(var+eps)``."""
    if linear.kind not in LINEAR_KINDS:
        raise ParameterError(f"cannot fuse BatchNorm into {linear.kind}")
    w = np.asarray(linear.params["weight"], ACC)
    if w.shape[0] != bn.channels:
        raise DimensionError(f"BatchNorm has {bn.channels} channels, {linear.id!r} has {w.shape[0]} outputs")
    s = bn.scale()
    mean = np.asarray(bn.mean, ACC)
    bn_bias = np.asarray(bn.bias, ACC)
    w_new = w * s.reshape((-1,) + (1,) * (w.ndim - 1))
    params = dict(linear.params)
    params["weight"] = w_new.astype(DTYPE)
    if "bias_map" in linear.params:
        b = np.asarray(linear.params["bias_map"], ACC)
        params["bias_map"] = (s[:, None, None] * (b - mean[:, None, None]) + bn_bias[:, None, None]).astype(DTYPE)
    else:
        b = _param(linear, "bias", (w.shape[0],))
        params["bias"] = (s * (b - mean) + bn_bias).astype(DTYPE)
    return linear.with_(params=params)


def fuse_bn_then_linear(
    bn: BatchNormParams,
    linear: LayerNode,
    in_shape: Sequence[int] | None = None,
    tol: float = DEGENERACY_TOL,
) -> LayerNode:
    """Fold a BN that precedes ``linear``: input channels are scaled by ``w_BN/sqrt(var+eps)``.

    For a padded Conv2d ``in_shape`` (C x H x W of the BN output) is required: the
    BN offset passes through the zero-padded border differently from the interior,
    so the fused bias becomes a full map evaluated here once.  A non-zero pad value
    ``p`` becomes ``p * sqrt(var+eps) / w_BN`` per channel.
    """
    if linear.kind not in LINEAR_KINDS:
        raise ParameterError(f"cannot fuse BatchNorm into {linear.kind}")
    w = np.asarray(linear.params["weight"], ACC)
    if w.shape[1] != bn.channels:
        raise DimensionError(f"BatchNorm has {bn.channels} channels, {linear.id!r} expects {w.shape[1]} inputs")
    s = bn.scale()
    t = bn.shift()
    params = dict(linear.params)
    if linear.kind == LINEAR:
        params["weight"] = (w * s[None, :]).astype(DTYPE)
        params["bias"] = (_param(linear, "bias", (w.shape[0],)) + w @ t).astype(DTYPE)
        return linear.with_(params=params)

    params["weight"] = (w * s[None, :, None, None]).astype(DTYPE)
    pad = linear.pad
    attrs = dict(linear.attrs)
    if pad.has_nonzero_value and not pad.is_zero_width:
        bad = bn.degenerate_channels(tol)
        if bad.size:
            c = int(bad[0])
            raise DegenerateChannelError(c, float(bn.weight[c]), linear.id)
        q = np.broadcast_to(np.asarray(pad.value, ACC), (bn.channels,)) / s
        params.pop("pad_value", None)
        if np.all(q == q[0]):
            attrs["pad_value"] = float(q[0])
        else:
            attrs["pad_value"] = 0.0
            params["pad_value"] = q.astype(DTYPE)

    if pad.is_zero_width or not np.any(t != 0):
        offset = np.einsum("ocij,c->o", w, t)
        if "bias_map" in linear.params:
            params["bias_map"] = (np.asarray(linear.params["bias_map"], ACC) + offset[:, None, None]).astype(DTYPE)
        else:
            params["bias"] = (_param(linear, "bias", (w.shape[0],)) + offset).astype(DTYPE)
        return linear.with_(params=params, attrs=attrs)

    if in_shape is None:
        raise ParameterError(f"input shape required to fold BatchNorm into padded conv {linear.id!r}")
    c, h, wd = in_shape
    shift_map = np.broadcast_to(t[:, None, None], (c, h, wd))
    zero_pad = PadSpec(pad.top, pad.bottom, pad.left, pad.right, 0.0)
    bias_map = T._correlate(T.pad_input(shift_map, zero_pad), w, linear.stride)
    if linear.bias_term is not None:
        bias_map = bias_map + T._bias_term(np.asarray(linear.bias_term), bias_map.shape)
    params.pop("bias", None)
    params["bias_map"] = bias_map.astype(DTYPE)
    return linear.with_(params=params, attrs=attrs)


def swap_bn_relu(bn: BatchNormParams, node_id: str = "thresh", tol: float = DEGENERACY_TOL):
    """Turn ``ReLU(BN(x))`` into ``BN(ThreshReLU(x))``.

    Returns the ThreshReLU node (per-channel threshold ``z`` and direction
    ``sign(w_BN)``) and the unchanged BN, which now follows it.
    """
    z = bn.threshold(tol)
    sign = np.where(np.asarray(bn.weight, ACC) > 0, 1.0, -1.0)
    node = LayerNode(node_id, THRESH_RELU, params={"z": z.astype(DTYPE), "sign": sign.astype(DTYPE)})
    return node, bn


def fuse_bn_concat_linear(bn: BatchNormParams, slices: Sequence[tuple[int, int]], linear: LayerNode) -> LayerNode:
    """Fold a BN applied to some slices of a Linear layer's concatenated input.

    ``slices`` are half-open column ranges of ``linear``'s input that carry the BN
    output; all other columns are left untouched.
    """
    if linear.kind != LINEAR:
        raise ParameterError(f"slice fusion needs a Linear consumer, got {linear.kind}")
    w = np.asarray(linear.params["weight"], ACC)
    n_in = w.shape[1]
    spans = sorted((int(a), int(b)) for a, b in slices)
    for a, b in spans:
        if not (0 <= a < b <= n_in):
            raise DimensionError(f"slice {a}:{b} outside the {n_in}-wide input of {linear.id!r}")
        if b - a != bn.channels:
            raise DimensionError(f"slice {a}:{b} is {b - a} wide, BatchNorm has {bn.channels} channels")
    for (a0, b0), (a1, b1) in zip(spans, spans[1:]):
        if a1 < b0:
            raise DimensionError(f"slices {a0}:{b0} and {a1}:{b1} overlap")
    s = bn.scale()
    t = bn.shift()
    w_new = w.copy()
    bias = _param(linear, "bias", (w.shape[0],))
    for a, b in spans:
        w_new[:, a:b] = w[:, a:b] * s[None, :]
        bias = bias + w[:, a:b] @ t
    params = dict(linear.params)
    params["weight"] = w_new.astype(DTYPE)
    params["bias"] = bias.astype(DTYPE)
    return linear.with_(params=params)


# ---- graph passes --------------------------------------------------------------------

class _Work:
    """Mutable node table used while rewriting."""

    def __init__(self, graph: ModelGraph, report: FusionReport):
        self.nodes = dict(graph.nodes)
        self.input_id = graph.input_id
        self.output_id = graph.output_id
        self.report = report

    def graph(self) -> ModelGraph:
        return ModelGraph(self.nodes, self.input_id, self.output_id)

    def users(self, nid: str) -> list[str]:
        return [n.id for n in self.nodes.values() for i in n.inputs if i == nid]

    def sole_user(self, nid: str) -> LayerNode | None:
        if nid == self.output_id:
            return None
        u = self.users(nid)
        return self.nodes[u[0]] if len(u) == 1 else None

    def bypass(self, nid: str) -> None:
        """Remove a single-input node, rewiring its users to its input."""
        src = self.nodes[nid].inputs[0]
        for k, n in list(self.nodes.items()):
            if nid in n.inputs:
                self.nodes[k] = n.with_(inputs=tuple(src if i == nid else i for i in n.inputs))
        if self.output_id == nid:
            self.output_id = src
        del self.nodes[nid]

    def bns(self) -> list[LayerNode]:
        order = self.graph().topo_order()
        return [self.nodes[k] for k in order if self.nodes[k].kind == BATCHNORM]

    def shapes(self):
        return infer_shapes(self.graph())


def _pass_linear_bn(work: _Work) -> bool:
    for bn in work.bns():
        prod = work.nodes[bn.inputs[0]]
        if prod.kind in LINEAR_KINDS and work.sole_user(prod.id) is bn:
            work.nodes[prod.id] = fuse_linear_then_bn(prod, bn.bn_params())
            work.bypass(bn.id)
            work.report.fusions.append(Fusion("linear_bn", bn.id, prod.id))
            return True
    return False


def _fits(consumer: LayerNode, shape) -> bool:
    return (consumer.kind == LINEAR and len(shape) == 1) or (consumer.kind == CONV2D and len(shape) == 3)


def _absorb(work: _Work, bn: LayerNode, consumer: LayerNode, in_shape) -> bool:
    """Fold ``bn`` forward into ``consumer``; returns False if blocked by degeneracy."""
    try:
        fused = fuse_bn_then_linear(bn.bn_params(), consumer, in_shape)
    except DegenerateChannelError as exc:
        work.report.untouched.append((bn.id, f"degenerate channel {exc.channel} with non-zero padding"))
        return False
    if "bias_map" in fused.params and "bias_map" not in consumer.params:
        work.report.bias_maps += 1
    work.nodes[consumer.id] = fused
    return True


def _pass_bn_linear(work: _Work) -> bool:
    shapes = work.shapes()
    for bn in work.bns():
        if bn.id in _blocked(work):
            continue
        c = work.sole_user(bn.id)
        if c is not None and _fits(c, shapes[bn.id]) and _absorb(work, bn, c, shapes[bn.id]):
            work.bypass(bn.id)
            work.report.fusions.append(Fusion("bn_linear", bn.id, c.id))
            return True
    return False


def _swap(work: _Work, bn: LayerNode, relu: LayerNode) -> bool:
    try:
        thresh, _ = swap_bn_relu(bn.bn_params(), relu.id)
    except DegenerateChannelError as exc:
        work.report.untouched.append((bn.id, f"degenerate channel {exc.channel}; ReLU swap undefined"))
        return False
    # BN now sits between the ThreshReLU and the relu's old consumer.
    work.nodes[relu.id] = thresh.with_(inputs=bn.inputs, group=relu.group)
    work.nodes[bn.id] = bn.with_(inputs=(relu.id,))
    return True


def _pass_bn_relu_linear(work: _Work) -> bool:
    shapes = work.shapes()
    for bn in work.bns():
        if bn.id in _blocked(work):
            continue
        relu = work.sole_user(bn.id)
        if relu is None or relu.kind != RELU:
            continue
        c = work.sole_user(relu.id)
        if c is None or not _fits(c, shapes[relu.id]):
            continue
        if bn.bn_params().degenerate_channels().size:
            work.report.untouched.append((bn.id, "degenerate channel; ReLU swap undefined"))
            continue
        snapshot = dict(work.nodes)
        if not (_swap(work, bn, relu) and _absorb(work, bn, c, shapes[bn.id])):
            work.nodes = snapshot
            continue
        del work.nodes[bn.id]
        work.report.thresh_inserted += 1
        work.report.fusions.append(Fusion("bn_relu_linear", bn.id, c.id))
        return True
    return False


def _pass_bn_relu_avgpool_linear(work: _Work) -> bool:
    shapes = work.shapes()
    for bn in work.bns():
        if bn.id in _blocked(work):
            continue
        relu = work.sole_user(bn.id)
        if relu is None or relu.kind != RELU:
            continue
        pool = work.sole_user(relu.id)
        if pool is None or pool.kind != AVGPOOL:
            continue
        c = work.sole_user(pool.id)
        if c is None or not _fits(c, shapes[pool.id]):
            continue
        if bn.bn_params().degenerate_channels().size:
            work.report.untouched.append((bn.id, "degenerate channel; ReLU swap undefined"))
            continue
        snapshot = dict(work.nodes)
        if not (_swap(work, bn, relu) and _absorb(work, bn, c, shapes[pool.id])):
            work.nodes = snapshot
            continue
        # ThreshReLU -> AvgPool -> c, with the BN already folded into c.
        del work.nodes[bn.id]
        work.report.thresh_inserted += 1
        work.report.fusions.append(Fusion("bn_relu_avgpool_linear", bn.id, c.id))
        return True
    return False


def _pass_bn_concat_linear(work: _Work) -> bool:
    shapes = work.shapes()
    for bn in work.bns():
        if bn.id in _blocked(work) or len(shapes[bn.id]) != 1:
            continue
        users = work.users(bn.id)
        if not users or len(set(users)) != 1 or bn.id == work.output_id:
            continue
        cat = work.nodes[users[0]]
        if cat.kind != CONCAT or len(shapes[cat.id]) != 1:
            continue
        lin = work.sole_user(cat.id)
        if lin is None or lin.kind != LINEAR:
            continue
        spans = [r for i, r in zip(cat.inputs, concat_slices(cat)) if i == bn.id]
        work.nodes[lin.id] = fuse_bn_concat_linear(bn.bn_params(), spans, lin)
        src = bn.inputs[0]
        work.nodes[cat.id] = cat.with_(inputs=tuple(src if i == bn.id else i for i in cat.inputs))
        del work.nodes[bn.id]
        work.report.fusions.append(Fusion("bn_concat_linear", bn.id, lin.id))
        return True
    return False


def _blocked(work: _Work) -> set[str]:
    return {i for i, _ in work.report.untouched}


_PASS_FUNCS = {
    "linear_bn": _pass_linear_bn,
    "bn_linear": _pass_bn_linear,
    "bn_relu_linear": _pass_bn_relu_linear,
    "bn_relu_avgpool_linear": _pass_bn_relu_avgpool_linear,
    "bn_concat_linear": _pass_bn_concat_linear,
}


def canonize_graph(graph: ModelGraph, passes: Sequence[str] = PASSES) -> tuple[ModelGraph, FusionReport]:
    """Apply the named passes in the fixed canonical order, each to a fixpoint."""
    unknown = [p for p in passes if p not in _PASS_FUNCS]
    if unknown:
        raise ValueError(f"unknown pass(es) {unknown}; known: {list(PASSES)}")
    chosen = [p for p in PASSES if p in passes]
    report = FusionReport(passes=chosen)
    work = _Work(check_graph(graph), report)
    for name in chosen:
        while _PASS_FUNCS[name](work):
            pass
    flagged = {i for i, _ in report.untouched}
    users = {n.id: work.users(n.id) for n in work.nodes.values() if n.kind == BATCHNORM}
    for bn in work.bns():
        if bn.id in flagged:
            continue
        u = users[bn.id]
        if len(u) > 1:
            reason = f"output fans out to {len(u)} consumers ({', '.join(u)})"
        elif bn.id == work.output_id:
            reason = "BatchNorm is the graph output with no linear neighbour"
        else:
            reason = "no fusible pattern"
        report.untouched.append((bn.id, reason))
    # Keep only the first reason recorded per BN, and drop BNs that were removed after all.
    seen, kept = set(), []
    for i, r in report.untouched:
        if i in work.nodes and i not in seen:
            seen.add(i)
            kept.append((i, r))
    report.untouched = kept
    return check_graph(work.graph()), report


def max_deviation(original: ModelGraph, rewritten: ModelGraph, n_inputs: int, seed: int = 0,
                  low: float = -1.0, high: float = 1.0) -> float:
    """Largest ``|f(x) - g(x)| / (1 + |f(x)|)`` over ``n_inputs`` uniform random inputs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_inputs):
        x = rng.uniform(low, high, size=original.input_shape).astype(DTYPE)
        a = forward(original, x)[0].astype(ACC)
        b = forward(rewritten, x)[0].astype(ACC)
        worst = max(worst, float(np.max(np.abs(a - b) / (1.0 + np.abs(a)))))
    return worst
