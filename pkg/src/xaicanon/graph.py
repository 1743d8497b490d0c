"""Feed-forward graph IR: typed layer nodes, validation and forward execution."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .errors import CycleError, DanglingReferenceError, DimensionError, GraphError, NodeShapeError, ParameterError
from .tensor import BatchNormParams, PadSpec

INPUT = "Input"
LINEAR = "Linear"
CONV2D = "Conv2d"
BATCHNORM = "BatchNorm"
RELU = "ReLU"
THRESH_RELU = "ThreshReLU"
AVGPOOL = "AvgPool"
MAXPOOL = "MaxPool"
FLATTEN = "Flatten"
CONCAT = "Concat"
ADD = "Add"
GLOBAL_AVGPOOL = "GlobalAvgPool"

KINDS = (INPUT, LINEAR, CONV2D, BATCHNORM, RELU, THRESH_RELU, AVGPOOL, MAXPOOL, FLATTEN, CONCAT, ADD, GLOBAL_AVGPOOL)
LINEAR_KINDS = (LINEAR, CONV2D)

_REQUIRED_PARAMS = {
    LINEAR: ("weight", "bias"),
    CONV2D: ("weight",),
    BATCHNORM: ("weight", "bias", "mean", "var"),
    THRESH_RELU: ("z", "sign"),
}

DEFAULT_GROUP = "default"


@dataclass(frozen=True, eq=False)
class LayerNode:
    """One layer.  ``params`` hold read-only float32 arrays, ``attrs`` plain JSON values."""

    id: str
    kind: str
    inputs: tuple[str, ...] = ()
    params: Mapping[str, np.ndarray] = field(default_factory=dict)
    attrs: Mapping[str, object] = field(default_factory=dict)
    group: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}", self.id)
        object.__setattr__(self, "inputs", tuple(self.inputs))
        params = {}
        for name, v in self.params.items():
            arr = np.asarray(v)
            if arr.dtype != T.DTYPE or arr.flags.writeable:
                arr = T.frozen(np.array(arr, dtype=T.DTYPE))
            params[name] = arr
        object.__setattr__(self, "params", MappingProxyType(params))
        object.__setattr__(self, "attrs", MappingProxyType(dict(self.attrs)))

    @property
    def group_tag(self) -> str:
        return self.group or DEFAULT_GROUP

    def with_(self, **changes) -> "LayerNode":
        return replace(self, **changes)

    # ---- typed views of attrs -------------------------------------------------
    @property
    def stride(self) -> tuple[int, int]:
        s = self.attrs.get("stride", (1, 1))
        return (int(s[0]), int(s[1]))

    @property
    def kernel_size(self) -> tuple[int, int]:
        k = self.attrs["kernel"]
        return (int(k[0]), int(k[1]))

    @property
    def pool_stride(self) -> tuple[int, int]:
        s = self.attrs.get("stride", self.attrs["kernel"])
        return (int(s[0]), int(s[1]))

    @property
    def pad(self) -> PadSpec:
        t, b, l, r = (int(v) for v in self.attrs.get("pad", (0, 0, 0, 0)))
        value = self.params["pad_value"] if "pad_value" in self.params else float(self.attrs.get("pad_value", 0.0))
        return PadSpec(t, b, l, r, value)

    @property
    def bias_term(self) -> np.ndarray | None:
        if "bias_map" in self.params:
            return self.params["bias_map"]
        return self.params.get("bias")

    def bn_params(self) -> BatchNormParams:
        p = self.params
        return BatchNormParams(p["weight"], p["bias"], p["mean"], p["var"], float(self.attrs.get("eps", 1e-5)))

    def same_as(self, other: "LayerNode") -> bool:
        """Structural and bitwise parameter equality."""
        if (self.id, self.kind, self.inputs, self.group) != (other.id, other.kind, other.inputs, other.group):
            return False
        if _jsonable(self.attrs) != _jsonable(other.attrs):
            return False
        if set(self.params) != set(other.params):
            return False
        return all(
            self.params[k].shape == other.params[k].shape
            and self.params[k].tobytes() == other.params[k].tobytes()
            for k in self.params
        )


def _jsonable(v):
    if isinstance(v, Mapping):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass(frozen=True, eq=False)
class ModelGraph:
    """A DAG of :class:`LayerNode` with a single input and a single output node."""

    nodes: Mapping[str, LayerNode]
    input_id: str
    output_id: str

    def __post_init__(self):
        object.__setattr__(self, "nodes", MappingProxyType(dict(self.nodes)))

    @classmethod
    def from_nodes(cls, nodes: Iterable[LayerNode], output_id: str | None = None) -> "ModelGraph":
        nodes = list(nodes)
        inputs = [n.id for n in nodes if n.kind == INPUT]
        if len(inputs) != 1:
            raise GraphError(f"expected exactly one Input node, found {len(inputs)}")
        ids = [n.id for n in nodes]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise GraphError(f"duplicate node id {dup!r}", dup)
        return cls({n.id: n for n in nodes}, inputs[0], output_id or nodes[-1].id)

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        if (self.input_id, self.output_id, list(self.nodes)) != (other.input_id, other.output_id, list(other.nodes)):
            return False
        return all(self.nodes[k].same_as(other.nodes[k]) for k in self.nodes)

    __hash__ = None

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(int(s) for s in self.nodes[self.input_id].attrs["shape"])

    def consumers(self) -> dict[str, list[str]]:
        """Map each node id to the ids of nodes reading it (one entry per edge)."""
        out: dict[str, list[str]] = {k: [] for k in self.nodes}
        for n in self.nodes.values():
            for i in n.inputs:
                if i in out:
                    out[i].append(n.id)
        return out

    def topo_order(self) -> list[str]:
        """Kahn's algorithm; ties resolved by node insertion order."""
        missing = [(n.id, i) for n in self.nodes.values() for i in n.inputs if i not in self.nodes]
        if missing:
            nid, ref = missing[0]
            raise DanglingReferenceError(f"node {nid!r} references missing node {ref!r}", ref)
        position = {k: i for i, k in enumerate(self.nodes)}
        indeg = {k: len(set(n.inputs)) for k, n in self.nodes.items()}
        users: dict[str, set[str]] = {k: set() for k in self.nodes}
        for n in self.nodes.values():
            for i in set(n.inputs):
                users[i].add(n.id)
        ready = sorted((k for k, d in indeg.items() if d == 0), key=position.get)
        order: list[str] = []
        while ready:
            k = ready.pop(0)
            order.append(k)
            fresh = []
            for u in users[k]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    fresh.append(u)
            ready = sorted(ready + fresh, key=position.get)
        if len(order) != len(self.nodes):
            cyc = _find_cycle(self)
            raise CycleError(f"cycle detected through nodes {cyc}", cyc[0] if cyc else None)
        return order

    def replace_nodes(self, nodes: Iterable[LayerNode], output_id: str | None = None) -> "ModelGraph":
        return ModelGraph({n.id: n for n in nodes}, self.input_id, output_id or self.output_id)

    def count(self, kind: str) -> int:
        return sum(1 for n in self.nodes.values() if n.kind == kind)

    def groups(self) -> list[str]:
        seen: list[str] = []
        for n in self.nodes.values():
            if n.kind in LINEAR_KINDS and n.group_tag not in seen:
                seen.append(n.group_tag)
        return seen


def _find_cycle(graph: ModelGraph) -> list[str]:
    color: dict[str, int] = {}
    stack: list[str] = []

    def visit(k: str) -> list[str] | None:
        color[k] = 1
        stack.append(k)
        for i in graph.nodes[k].inputs:
            if i not in graph.nodes:
                continue
            if color.get(i) == 1:
                return stack[stack.index(i):]
            if color.get(i) is None:
                found = visit(i)
                if found:
                    return found
        stack.pop()
        color[k] = 2
        return None

    for k in graph.nodes:
        if k not in color:
            found = visit(k)
            if found:
                return sorted(found)
    return []


# ---- shape inference -------------------------------------------------------------

def node_output_shape(node: LayerNode, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    """Output shape of ``node`` given its input shapes; raises on any mismatch."""
    k = node.kind
    if k == INPUT:
        return tuple(int(s) for s in node.attrs["shape"])
    for name in _REQUIRED_PARAMS.get(k, ()):
        if name not in node.params:
            raise ParameterError(f"missing parameter {name!r}")
    if k in (ADD,):
        if len(in_shapes) < 2:
            raise DimensionError("Add needs at least two inputs")
        if len(set(in_shapes)) != 1:
            raise DimensionError(f"Add inputs disagree: {in_shapes}")
        return in_shapes[0]
    if k == CONCAT:
        return _concat_shape(node, in_shapes)
    if len(in_shapes) != 1:
        raise DimensionError(f"{k} takes exactly one input, got {len(in_shapes)}")
    s = in_shapes[0]
    if k == LINEAR:
        w = node.params["weight"]
        if len(s) != 1 or w.ndim != 2 or w.shape[1] != s[0]:
            raise DimensionError(f"weight {w.shape} does not conform to input {s}")
        if node.params["bias"].shape != (w.shape[0],):
            raise DimensionError(f"bias {node.params['bias'].shape} does not match weight {w.shape}")
        return (w.shape[0],)
    if k == CONV2D:
        if len(s) != 3:
            raise DimensionError(f"Conv2d needs a C x H x W input, got {s}")
        out = T.conv2d_output_shape(s, node.params["weight"].shape, node.stride, node.pad)
        if "bias_map" in node.params and node.params["bias_map"].shape != out:
            raise DimensionError(f"bias map {node.params['bias_map'].shape} does not match output {out}")
        if "bias" in node.params and node.params["bias"].shape != (out[0],):
            raise DimensionError(f"bias {node.params['bias'].shape} does not match {out[0]} output channels")
        if "pad_value" in node.params and node.params["pad_value"].shape != (s[0],):
            raise DimensionError(f"pad values {node.params['pad_value'].shape} do not match {s[0]} input channels")
        return out
    if k in (BATCHNORM, THRESH_RELU):
        if len(s) not in (1, 3):
            raise DimensionError(f"{k} needs a C or C x H x W input, got {s}")
        names = ("weight", "bias", "mean", "var") if k == BATCHNORM else ("z", "sign")
        for name in names:
            if node.params[name].shape != (s[0],):
                raise DimensionError(f"{k} has {node.params[name].shape[0]} channels, upstream has {s[0]}")
        if k == BATCHNORM:
            node.bn_params()
        return s
    if k == RELU:
        return s
    if k in (AVGPOOL, MAXPOOL):
        if len(s) != 3:
            raise DimensionError(f"{k} needs a C x H x W input, got {s}")
        return T.pool_output_shape(s, node.kernel_size, node.pool_stride)
    if k == GLOBAL_AVGPOOL:
        if len(s) != 3:
            raise DimensionError(f"GlobalAvgPool needs a C x H x W input, got {s}")
        return (s[0],)
    if k == FLATTEN:
        return (int(np.prod(s)),)
    raise GraphError(f"no shape rule for {k}", node.id)


def _concat_shape(node: LayerNode, in_shapes) -> tuple[int, ...]:
    if not in_shapes:
        raise DimensionError("Concat needs at least one input")
    rest = {s[1:] for s in in_shapes}
    if len(rest) != 1:
        raise DimensionError(f"Concat inputs disagree off the channel axis: {in_shapes}")
    widths = [s[0] for s in in_shapes]
    declared = node.attrs.get("widths")
    if declared is not None and [int(w) for w in declared] != widths:
        raise DimensionError(f"Concat slice layout {list(declared)} does not match input widths {widths}")
    return (sum(widths),) + in_shapes[0][1:]


def concat_slices(node: LayerNode) -> list[tuple[int, int]]:
    """Half-open channel ranges contributed by each Concat input, in input order."""
    out, start = [], 0
    for w in node.attrs["widths"]:
        out.append((start, start + int(w)))
        start += int(w)
    return out


def infer_shapes(graph: ModelGraph, strict: bool = True) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for k in graph.topo_order():
        node = graph.nodes[k]
        if any(i not in shapes for i in node.inputs):
            continue
        try:
            shapes[k] = node_output_shape(node, [shapes[i] for i in node.inputs])
        except (DimensionError, ParameterError, KeyError) as exc:
            if strict:
                raise NodeShapeError(f"node {k!r}: {exc}", k) from exc
    return shapes


def with_concat_layout(graph: ModelGraph) -> ModelGraph:
    """Fill in the ``widths`` attribute of every Concat from inferred shapes."""
    shapes = infer_shapes(graph)
    nodes = []
    for n in graph.nodes.values():
        if n.kind == CONCAT:
            n = n.with_(attrs={**n.attrs, "widths": [int(shapes[i][0]) for i in n.inputs]})
        nodes.append(n)
    return graph.replace_nodes(nodes)


def validate_graph(graph: ModelGraph) -> list[str]:
    """Return every invariant violation as a message; empty means valid."""
    problems: list[str] = []
    nodes = graph.nodes
    if graph.input_id not in nodes or nodes[graph.input_id].kind != INPUT:
        problems.append(f"input node {graph.input_id!r} missing or not of kind Input")
    if graph.output_id not in nodes:
        problems.append(f"output node {graph.output_id!r} does not exist")
    for n in nodes.values():
        if n.kind == INPUT:
            if n.inputs:
                problems.append(f"node {n.id!r}: Input node must not have inputs")
            if n.id != graph.input_id:
                problems.append(f"node {n.id!r}: second Input node")
        elif not n.inputs:
            problems.append(f"node {n.id!r}: no inputs")
        for i in n.inputs:
            if i not in nodes:
                problems.append(f"node {n.id!r}: dangling reference to {i!r}")
        if n.kind == CONCAT and "widths" not in n.attrs:
            problems.append(f"node {n.id!r}: Concat without recorded slice layout")
    cyc = _find_cycle(graph)
    if cyc:
        problems.append(f"cycle through nodes {cyc}")
    if problems:
        return problems
    users = graph.consumers()
    for k, u in users.items():
        if not u and k != graph.output_id:
            problems.append(f"node {k!r}: output unused (graph must have exactly one output)")
    shapes: dict[str, tuple[int, ...]] = {}
    for k in graph.topo_order():
        node = nodes[k]
        if any(i not in shapes for i in node.inputs):
            continue
        try:
            shapes[k] = node_output_shape(node, [shapes[i] for i in node.inputs])
        except (DimensionError, ParameterError, KeyError) as exc:
            problems.append(f"node {k!r}: {exc}")
    return problems


def check_graph(graph: ModelGraph) -> ModelGraph:
    problems = validate_graph(graph)
    if problems:
        raise GraphError("invalid graph: " + "; ".join(problems))
    return graph


# ---- execution -----------------------------------------------------------------

def eval_node(node: LayerNode, args: list[np.ndarray]) -> np.ndarray:
    k = node.kind
    if k == LINEAR:
        return T.linear_forward(args[0], node.params["weight"], node.params["bias"])
    if k == CONV2D:
        return T.conv2d_forward(args[0], node.params["weight"], node.bias_term, node.stride, node.pad)
    if k == BATCHNORM:
        return T.batchnorm_forward(args[0], node.bn_params())
    if k == RELU:
        return T.relu_forward(args[0])
    if k == THRESH_RELU:
        return T.thresh_relu_apply(args[0], node.params["z"], node.params["sign"])
    if k == AVGPOOL:
        return T.avgpool_forward(args[0], node.kernel_size, node.pool_stride)
    if k == MAXPOOL:
        return T.maxpool_forward(args[0], node.kernel_size, node.pool_stride)
    if k == GLOBAL_AVGPOOL:
        return T.global_avgpool_forward(args[0])
    if k == FLATTEN:
        return np.ascontiguousarray(args[0]).reshape(-1)
    if k == CONCAT:
        return np.concatenate(args, axis=0)
    if k == ADD:
        acc = args[0].astype(T.ACC)
        for a in args[1:]:
            acc = acc + a
        return acc.astype(T.DTYPE)
    raise GraphError(f"cannot evaluate kind {k}", node.id)


def forward(graph: ModelGraph, x: np.ndarray, record: bool = False):
    """Evaluate ``graph`` on ``x``.

    Returns ``(output, activations)`` where ``activations`` maps every node id to
    its output tensor when ``record`` is true (so every node's inputs are
    available to attribution) and is ``None`` otherwise.
    """
    x = np.asarray(x, dtype=T.DTYPE)
    if x.shape != graph.input_shape:
        raise NodeShapeError(f"node {graph.input_id!r}: input shape {x.shape} != declared {graph.input_shape}",
                             graph.input_id)
    values: dict[str, np.ndarray] = {graph.input_id: x}
    users = graph.consumers()
    remaining = {k: len(v) for k, v in users.items()}
    for k in graph.topo_order():
        if k == graph.input_id:
            continue
        node = graph.nodes[k]
        try:
            values[k] = eval_node(node, [values[i] for i in node.inputs])
        except (DimensionError, ParameterError) as exc:
            raise NodeShapeError(f"node {k!r}: {exc}", k) from exc
        if not record:
            for i in node.inputs:
                remaining[i] -= 1
                if remaining[i] == 0 and i != graph.output_id:
                    values.pop(i, None)
    out = values[graph.output_id]
    return out, (values if record else None)


def predict(graph: ModelGraph, x: np.ndarray) -> np.ndarray:
    return forward(graph, x)[0]
