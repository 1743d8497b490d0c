"""Modified-backpropagation attributions: LRP rules, composites, gradient saliency.

Relevance is propagated in float64 through the graph in reverse topological
order.  Linear and Conv2d layers use the rule a :class:`Composite` assigns to
them; every other layer kind has one fixed treatment (see
:func:`lrp_backward_passthrough`).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .graph import (
    ADD, AVGPOOL, BATCHNORM, CONCAT, CONV2D, FLATTEN, GLOBAL_AVGPOOL, INPUT, LINEAR, LINEAR_KINDS,
    MAXPOOL, RELU, THRESH_RELU, LayerNode, ModelGraph, forward,
)
from .tensor import ACC, DTYPE, PadSpec

DEFAULT_EPSILON = 1e-6


# ---- rules -------------------------------------------------------------------------------

@dataclass(frozen=True)
class Epsilon:
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class Gamma:
    gamma: float = 0.25
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ParameterError(f"gamma must be >= 0, got {self.gamma}")
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class AlphaBeta:
    alpha: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.alpha - self.beta != 1:
            raise ParameterError(f"alpha - beta must equal 1, got alpha={self.alpha}, beta={self.beta}")


@dataclass(frozen=True, eq=False)
class Box:
    """Bounded-input rule for the first layer; ``low``/``high`` are scalars or input-shaped."""

    low: Union[float, np.ndarray] = 0.0
    high: Union[float, np.ndarray] = 1.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if np.any(np.asarray(self.low) > np.asarray(self.high)):
            raise ParameterError("box rule needs low <= high elementwise")


@dataclass(frozen=True)
class Passthrough:
    """Propagate through the layer's Jacobian (plain gradient), as for layers without a rule."""


Rule = Union[Epsilon, Gamma, AlphaBeta, Box, Passthrough]


def rule_label(rule: Rule) -> str:
    if isinstance(rule, Epsilon):
        return f"epsilon({rule.epsilon:g})"
    if isinstance(rule, Gamma):
        return f"gamma({rule.gamma:g})"
    if isinstance(rule, AlphaBeta):
        return f"alpha{rule.alpha:g}beta{rule.beta:g}"
    if isinstance(rule, Box):
        return "box"
    return "pass"


# ---- composites ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Composite:
    """Ordered ``(selector, rule)`` pairs; the first matching selector wins.

    Selectors: ``kind:<Kind>``, ``group:<tag>``, ``id:<node id>`` and ``input``
    (linear layers reading the graph input directly).
    """

    name: str
    entries: tuple[tuple[str, Rule], ...] = ()
    default: Rule = field(default_factory=Epsilon)

    def rule_for(self, node: LayerNode, graph: ModelGraph) -> Rule:
        for selector, rule in self.entries:
            if _matches(selector, node, graph):
                return rule
        return self.default

    def resolve(self, graph: ModelGraph) -> dict[str, Rule]:
        return {n.id: self.rule_for(n, graph) for n in graph.nodes.values() if n.kind in LINEAR_KINDS}


def _matches(selector: str, node: LayerNode, graph: ModelGraph) -> bool:
    if selector == "input":
        return graph.input_id in node.inputs
    key, _, value = selector.partition(":")
    if key == "kind":
        return node.kind == value
    if key == "group":
        return node.group_tag == value
    if key == "id":
        return node.id == value
    raise ParameterError(f"unknown composite selector {selector!r}")


def epsilon_composite(epsilon: float = DEFAULT_EPSILON) -> Composite:
    return Composite("epsilon", (), Epsilon(epsilon))


def eps_plus() -> Composite:
    return Composite("eps-plus", (("kind:Conv2d", AlphaBeta(1, 0)), ("kind:Linear", Epsilon())))


def alpha2beta1() -> Composite:
    return Composite("a2b1", (("kind:Conv2d", AlphaBeta(2, 1)), ("kind:Linear", Epsilon())))


def lrp_custom(low=0.0, high=1.0) -> Composite:
    return Composite("custom", (("input", Box(low, high)), ("kind:Conv2d", AlphaBeta(1, 0)),
                                ("kind:Linear", AlphaBeta(1, 0))))


def excitation_backprop() -> Composite:
    return Composite("eb", (), AlphaBeta(1, 0))


def gamma_composite(gammas: dict[str, float], default: float = 0.0, name: str | None = None) -> Composite:
    entries = tuple((f"group:{g}", Gamma(float(v))) for g, v in gammas.items())
    label = name or "gamma[" + ",".join(f"{g}={v:g}" for g, v in gammas.items()) + "]"
    return Composite(label, entries, Gamma(float(default)))


def uniform_composite(rule: Rule, name: str) -> Composite:
    return Composite(name, (), rule)


BUILTIN_COMPOSITES: dict[str, Callable[[], Composite]] = {
    "eps-plus": eps_plus,
    "a2b1": alpha2beta1,
    "custom": lrp_custom,
    "eb": excitation_backprop,
    "epsilon": epsilon_composite,
}


# ---- heatmaps -----------------------------------------------------------------------------

@dataclass(eq=False)
class Heatmap:
    values: np.ndarray
    composite: str
    target: int
    canonized: bool = False
    zero_denominators: int = 0


@dataclass
class _Diagnostics:
    zero_denominators: int = 0


# ---- per-layer linear maps ------------------------------------------------------------------

class _LinearMap:
    """``a -> W a`` for a Linear or Conv2d node, its transpose, and the absorbed bias."""

    def __init__(self, node: LayerNode, in_shape: tuple[int, ...]):
        self.node = node
        self.in_shape = in_shape
        self.weight = np.asarray(node.params["weight"], ACC)
        if node.kind == CONV2D:
            pad = node.pad
            self.zero_pad = PadSpec(pad.top, pad.bottom, pad.left, pad.right, 0.0)
            out_shape = T.conv2d_output_shape(in_shape, self.weight.shape, node.stride, pad)
            bias = np.zeros(out_shape, dtype=ACC)
            if node.bias_term is not None:
                bias = bias + T._bias_term(np.asarray(node.bias_term), out_shape)
            if pad.has_nonzero_value and not pad.is_zero_width:
                # Constant border values act like a bias: fold them in.
                border = T.pad_input(np.zeros(in_shape), pad)
                bias = bias + T._correlate(border, self.weight, node.stride)
        else:
            bias = np.asarray(node.params["bias"], ACC)
        self.bias = bias

    def fwd(self, a: np.ndarray, w: np.ndarray) -> np.ndarray:
        if self.node.kind == LINEAR:
            return w @ a
        return T._correlate(T.pad_input(a, self.zero_pad), w, self.node.stride)

    def bwd(self, g: np.ndarray, w: np.ndarray) -> np.ndarray:
        if self.node.kind == LINEAR:
            return w.T @ g
        return T.conv2d_input_grad(g, w, self.in_shape, self.node.stride, self.zero_pad)


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def _safe_divide(num: np.ndarray, den: np.ndarray, diag: _Diagnostics | None) -> np.ndarray:
    zero = den == 0
    if diag is not None:
        diag.zero_denominators += int(np.count_nonzero(zero & (num != 0)))
    return np.divide(num, den, out=np.zeros_like(num), where=~zero)


def lrp_backward_linear(node: LayerNode, a: np.ndarray, r_out: np.ndarray, rule: Rule,
                        diag: _Diagnostics | None = None) -> np.ndarray:
    """Redistribute ``r_out`` over the inputs ``a`` of a Linear/Conv2d node."""
    if node.kind not in LINEAR_KINDS:
        raise ParameterError(f"{node.kind} node {node.id!r} has no linear LRP rule")
    a = np.asarray(a, ACC)
    r_out = np.asarray(r_out, ACC)
    m = _LinearMap(node, a.shape)
    w, b = m.weight, m.bias
    if r_out.shape != np.shape(b):
        raise DimensionError(f"relevance {r_out.shape} does not match output of {node.id!r} {np.shape(b)}")

    if isinstance(rule, Epsilon):
        z = _stabilize(m.fwd(a, w) + b, rule.epsilon)
        s = _safe_divide(r_out, z, diag)
        return a * m.bwd(s, w)

    if isinstance(rule, Gamma):
        # Boost positive contributions: w+ for non-negative inputs, w- for negative ones.
        wp = w + rule.gamma * np.maximum(w, 0)
        wn = w + rule.gamma * np.minimum(w, 0)
        ap, an = np.maximum(a, 0), np.minimum(a, 0)
        z = m.fwd(ap, wp) + m.fwd(an, wn) + b + rule.gamma * np.maximum(b, 0)
        s = _safe_divide(r_out, _stabilize(z, rule.epsilon), diag)
        return ap * m.bwd(s, wp) + an * m.bwd(s, wn)

    if isinstance(rule, AlphaBeta):
        wp, wn = np.maximum(w, 0), np.minimum(w, 0)
        ap, an = np.maximum(a, 0), np.minimum(a, 0)
        zp = m.fwd(ap, wp) + m.fwd(an, wn) + np.maximum(b, 0)
        zn = m.fwd(ap, wn) + m.fwd(an, wp) + np.minimum(b, 0)
        sp = _safe_divide(rule.alpha * r_out, zp, diag)
        rel = ap * m.bwd(sp, wp) + an * m.bwd(sp, wn)
        if rule.beta:
            sn = _safe_divide(rule.beta * r_out, zn, diag)
            rel = rel - (ap * m.bwd(sn, wn) + an * m.bwd(sn, wp))
        return rel

    if isinstance(rule, Box):
        low = np.broadcast_to(np.asarray(rule.low, ACC), a.shape)
        high = np.broadcast_to(np.asarray(rule.high, ACC), a.shape)
        wp, wn = np.maximum(w, 0), np.minimum(w, 0)
        z = _stabilize(m.fwd(a, w) - m.fwd(low, wp) - m.fwd(high, wn), rule.epsilon)
        s = _safe_divide(r_out, z, diag)
        return a * m.bwd(s, w) - low * m.bwd(s, wp) - high * m.bwd(s, wn)

    if isinstance(rule, Passthrough):
        return m.bwd(r_out, w)

    raise ParameterError(f"unknown rule {rule!r}")


# ---- fixed treatments for the other layer kinds ----------------------------------------------

def _pool_windows_index(node: LayerNode, x: np.ndarray):
    kh, kw = node.kernel_size
    sh, sw = node.pool_stride
    _, ho, wo = T.pool_output_shape(x.shape, (kh, kw), (sh, sw))
    return kh, kw, sh, sw, ho, wo


def _maxpool_route(node: LayerNode, x: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Send each output value to the first (row-major) maximum of its window."""
    kh, kw, sh, sw, ho, wo = _pool_windows_index(node, x)
    win = T._pool_windows(x, (kh, kw), (sh, sw)).reshape(x.shape[0], ho, wo, kh * kw)
    arg = win.argmax(axis=-1)
    c, i, j = np.indices(arg.shape)
    rows = i * sh + arg // kw
    cols = j * sw + arg % kw
    out = np.zeros(x.shape, dtype=ACC)
    np.add.at(out, (c, rows, cols), np.asarray(r, ACC))
    return out


def _avgpool_transpose(node: LayerNode, shape, s: np.ndarray) -> np.ndarray:
    kh, kw = node.kernel_size
    sh, sw = node.pool_stride
    ho, wo = s.shape[1:]
    out = np.zeros(shape, dtype=ACC)
    for di in range(kh):
        for dj in range(kw):
            out[:, di:di + sh * (ho - 1) + 1:sh, dj:dj + sw * (wo - 1) + 1:sw] += s / (kh * kw)
    return out


def lrp_backward_passthrough(node: LayerNode, inputs: Sequence[np.ndarray], output: np.ndarray,
                             r_out: np.ndarray, epsilon: float = DEFAULT_EPSILON,
                             diag: _Diagnostics | None = None) -> list[np.ndarray]:
    """Relevance for each input of a non-linear-layer node.

    ReLU and ThreshReLU pass relevance unchanged; MaxPool routes it to the window
    winner; AvgPool/GlobalAvgPool and Add split it proportionally to each input's
    contribution (sign-matched stabilizer); Concat splits by slice; Flatten
    reshapes.  A BatchNorm left in the graph is treated as the diagonal affine
    map it is: relevance follows ``scale * x`` and the shift absorbs its share.
    """
    k = node.kind
    r = np.asarray(r_out, ACC)
    if k in (RELU, THRESH_RELU):
        return [r]
    if k == FLATTEN:
        return [r.reshape(np.shape(inputs[0]))]
    if k == CONCAT:
        out, start = [], 0
        for x in inputs:
            w = np.shape(x)[0]
            out.append(r[start:start + w])
            start += w
        return out
    if k == MAXPOOL:
        return [_maxpool_route(node, np.asarray(inputs[0]), r)]
    if k == AVGPOOL:
        x = np.asarray(inputs[0], ACC)
        s = _safe_divide(r, _stabilize(np.asarray(output, ACC), epsilon), diag)
        return [x * _avgpool_transpose(node, x.shape, s)]
    if k == GLOBAL_AVGPOOL:
        x = np.asarray(inputs[0], ACC)
        s = _safe_divide(r, _stabilize(x.mean(axis=(1, 2)), epsilon), diag)
        return [x * s[:, None, None] / (x.shape[1] * x.shape[2])]
    if k == ADD:
        xs = [np.asarray(x, ACC) for x in inputs]
        total = np.sum(xs, axis=0)
        s = _safe_divide(r, _stabilize(total, epsilon), diag)
        return [x * s for x in xs]
    if k == BATCHNORM:
        p = node.bn_params()
        x = np.asarray(inputs[0], ACC)
        bshape = (-1,) + (1,) * (x.ndim - 1)
        contrib = x * p.scale().astype(ACC).reshape(bshape)
        s = _safe_divide(r, _stabilize(contrib + p.shift().astype(ACC).reshape(bshape), epsilon), diag)
        return [contrib * s]
    raise ParameterError(f"no relevance treatment for {k} node {node.id!r}")


# ---- graph walk --------------------------------------------------------------------------------

def _backprop(graph: ModelGraph, acts: dict[str, np.ndarray], seed: np.ndarray, step) -> np.ndarray:
    """Reverse-topological accumulation; ``step(node, inputs, output, upstream)`` -> per-input values."""
    pending: dict[str, np.ndarray] = {graph.output_id: np.asarray(seed, ACC)}
    for k in reversed(graph.topo_order()):
        if k not in pending or graph.nodes[k].kind == INPUT:
            continue
        node = graph.nodes[k]
        upstream = pending.pop(k)
        grads = step(node, [acts[i] for i in node.inputs], acts[k], upstream)
        for i, g in zip(node.inputs, grads):
            pending[i] = pending[i] + g if i in pending else g
    return pending.get(graph.input_id, np.zeros(graph.input_shape, dtype=ACC))


def _seed(graph: ModelGraph, out: np.ndarray, target: int, value: float | None = None) -> np.ndarray:
    """One-hot seed at ``target``; ``value`` defaults to the logit itself."""
    if out.ndim != 1:
        raise DimensionError(f"attribution needs a 1-D output, got {out.shape}")
    if not 0 <= target < out.shape[0]:
        raise ParameterError(f"target class {target} outside output extent {out.shape[0]}")
    seed = np.zeros(out.shape, dtype=ACC)
    seed[target] = out[target] if value is None else value
    return seed


def attribute(graph: ModelGraph, x: np.ndarray, target_class: int, composite: Composite,
              canonized: bool = False, activations: dict[str, np.ndarray] | None = None) -> Heatmap:
    """LRP heatmap of the target logit with respect to the input (C x H x W or vector)."""
    if activations is None:
        _, activations = forward(graph, x, record=True)
    out = activations[graph.output_id]
    seed = _seed(graph, out, target_class)
    rules = composite.resolve(graph)
    diag = _Diagnostics()

    def step(node, inputs, output, r):
        if node.kind in LINEAR_KINDS:
            return [lrp_backward_linear(node, inputs[0], r, rules[node.id], diag)]
        return lrp_backward_passthrough(node, inputs, output, r, diag=diag)

    rel = _backprop(graph, activations, seed, step)
    return Heatmap(rel.astype(DTYPE), composite.name, int(target_class), canonized, diag.zero_denominators)


def gradient_backward(node: LayerNode, inputs: Sequence[np.ndarray], output: np.ndarray,
                      g: np.ndarray) -> list[np.ndarray]:
    """Exact vector-Jacobian product of one node."""
    k = node.kind
    g = np.asarray(g, ACC)
    if k in LINEAR_KINDS:
        m = _LinearMap(node, np.shape(inputs[0]))
        return [m.bwd(g, m.weight)]
    if k == RELU:
        return [g * (np.asarray(inputs[0]) > 0)]
    if k == THRESH_RELU:
        x = np.asarray(inputs[0])
        nd = x.ndim
        z = np.asarray(node.params["z"]).reshape((-1,) + (1,) * (nd - 1))
        sign = np.asarray(node.params["sign"]).reshape((-1,) + (1,) * (nd - 1))
        keep = ((sign > 0) & (x > z)) | ((sign < 0) & (x < z))
        return [g * keep]
    if k == MAXPOOL:
        return [_maxpool_route(node, np.asarray(inputs[0]), g)]
    if k == AVGPOOL:
        return [_avgpool_transpose(node, np.shape(inputs[0]), g)]
    if k == GLOBAL_AVGPOOL:
        _, h, w = np.shape(inputs[0])
        return [np.broadcast_to(g[:, None, None] / (h * w), np.shape(inputs[0])).copy()]
    if k == BATCHNORM:
        scale = node.bn_params().scale()
        return [g * scale.reshape((-1,) + (1,) * (g.ndim - 1))]
    if k in (FLATTEN, CONCAT, ADD):
        return lrp_backward_passthrough(node, inputs, output, g) if k != ADD else [g for _ in inputs]
    raise ParameterError(f"no gradient for {k} node {node.id!r}")


def gradient_saliency(graph: ModelGraph, x: np.ndarray, target_class: int, canonized: bool = False,
                      activations: dict[str, np.ndarray] | None = None) -> Heatmap:
    """Exact gradient of the target logit with respect to the input."""
    if activations is None:
        _, activations = forward(graph, x, record=True)
    seed = _seed(graph, activations[graph.output_id], target_class, 1.0)
    grad = _backprop(graph, activations, seed, gradient_backward)
    return Heatmap(grad.astype(DTYPE), "saliency", int(target_class), canonized)


# ---- post-processing -----------------------------------------------------------------------------

POOLINGS = ("sum", "pos-l2-norm-sq", "max-norm")


def pool_channels(r: np.ndarray, method: str = "sum") -> np.ndarray:
    """Reduce C x H x W relevance to H x W.

    ``sum`` adds channels, ``pos-l2-norm-sq`` sums squared positive parts and
    ``max-norm`` takes the largest absolute value over channels.
    """
    r = np.asarray(r, ACC)
    if r.ndim != 3:
        raise DimensionError(f"channel pooling expects C x H x W, got {r.shape}")
    if method == "sum":
        out = r.sum(axis=0)
    elif method == "pos-l2-norm-sq":
        out = (np.maximum(r, 0) ** 2).sum(axis=0)
    elif method == "max-norm":
        out = np.abs(r).max(axis=0)
    else:
        raise ValueError(f"unknown pooling {method!r}; expected one of {POOLINGS}")
    return out.astype(DTYPE)


def normalize_heatmap(h: np.ndarray) -> np.ndarray:
    """Divide by the square root of the second moment; an all-zero map is returned unchanged."""
    h = np.asarray(h)
    h64 = h.astype(ACC)
    m2 = float(np.mean(h64 * h64))
    if m2 == 0.0:
        return h.astype(DTYPE, copy=True)
    return (h64 / np.sqrt(m2)).astype(DTYPE)
