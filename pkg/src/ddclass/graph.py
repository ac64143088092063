"""Layer DAGs and their execution on a tape.

A :class:`NetworkGraph` is an ordered list of :class:`Layer` records; each
layer names its inputs (``"input"`` is the graph input) so skip connections,
tile routing and branch concatenation are plain edges.  Parameters live
outside the graph in a ``{name: array}`` dict keyed ``"<layer>.w"`` /
``"<layer>.b"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .autodiff import Tape
from .errors import ContractError, ShapeError

LAYER_KINDS = ("conv", "pool", "dense", "relu", "softmax", "flatten", "add", "concat", "tile")
PARAM_KINDS = ("conv", "dense")


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    inputs: tuple = ("input",)
    attrs: dict = field(default_factory=dict, hash=False, compare=True)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")


@dataclass
class NetworkGraph:
    input_shape: tuple
    num_classes: int
    layers: list = field(default_factory=list)

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)

    @property
    def output(self) -> str:
        return self.layers[-1].name if self.layers else "input"

    def layer(self, name: str) -> Layer:
        for lay in self.layers:
            if lay.name == name:
                return lay
        raise KeyError(name)

    @property
    def logits_layer(self) -> str:
        """Name of the node feeding the terminal softmax (the graph output otherwise)."""
        if self.layers and self.layers[-1].kind == "softmax":
            return self.layers[-1].inputs[0]
        return self.output

    def kinds(self) -> list[str]:
        return [lay.kind for lay in self.layers]

    def param_shapes(self) -> dict[str, tuple]:
        out = {}
        for lay in self.layers:
            if lay.kind == "conv":
                spec = lay.attrs["spec"]
                out[lay.name + ".w"] = spec.weight_shape
                out[lay.name + ".b"] = (spec.out_channels,)
            elif lay.kind == "dense":
                out[lay.name + ".w"] = (lay.attrs["in_features"], lay.attrs["units"])
                out[lay.name + ".b"] = (lay.attrs["units"],)
        return out

    def num_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))

    def shapes(self) -> dict[str, tuple]:
        """Per-sample output shape of every layer, validating the wiring."""
        shapes = {"input": self.input_shape}
        for lay in self.layers:
            try:
                ins = [shapes[i] for i in lay.inputs]
            except KeyError as exc:
                raise ContractError(f"layer {lay.name!r} reads unknown node {exc.args[0]!r}") from None
            try:
                shapes[lay.name] = _infer(lay, ins)
            except ShapeError as exc:
                raise ShapeError(f"layer {lay.name!r} ({lay.kind}): {exc}") from None
        return shapes

    def validate(self):
        shapes = self.shapes()
        out = shapes[self.output]
        if self.layers and out != (self.num_classes,):
            raise ContractError(f"graph output {out} is not a {self.num_classes}-class vector")
        return shapes


def _infer(lay: Layer, ins):
    a = lay.attrs
    x = ins[0]
    if lay.kind == "conv":
        spec = a["spec"]
        if len(x) != spec.rank + 1 or x[0] != spec.in_channels:
            raise ShapeError(f"input {x} does not match {spec.in_channels} channels, rank {spec.rank}")
        if spec.padding == "valid" and any(n < k for n, k in zip(x[1:], spec.kernel)):
            raise ShapeError(f"input {x[1:]} smaller than kernel {spec.kernel}")
        return (spec.out_channels,) + spec.output_spatial(x[1:])
    if lay.kind == "pool":
        w = a.get("window", 2)
        s = a.get("stride") or w
        sp = x[1:]
        if len(sp) < 1 or any(w > n for n in sp):
            raise ShapeError(f"pool window {w} larger than input {sp}")
        return (x[0],) + tuple((n - w) // s + 1 for n in sp)
    if lay.kind == "dense":
        if x != (a["in_features"],):
            raise ShapeError(f"expected ({a['in_features']},) features, got {x}")
        return (a["units"],)
    if lay.kind in ("relu", "softmax"):
        return x
    if lay.kind == "flatten":
        return (int(np.prod(x)),)
    if lay.kind == "add":
        if len(set(ins)) != 1:
            raise ShapeError(f"add operands differ: {ins}")
        return x
    if lay.kind == "concat":
        rest = {s[1:] for s in ins}
        if len(rest) != 1:
            raise ShapeError(f"concat operands disagree off-axis: {ins}")
        return (sum(s[0] for s in ins),) + ins[0][1:]
    if lay.kind == "tile":
        region = a["region"]
        if len(region) != len(x) - 1:
            raise ShapeError(f"tile region rank {len(region)} vs input {x}")
        for (lo, hi), n in zip(region, x[1:]):
            if not 0 <= lo < hi <= n:
                raise ShapeError(f"tile region {region} outside input {x}")
        return (x[0],) + tuple(hi - lo for lo, hi in region)
    raise ContractError(f"unknown layer kind {lay.kind!r}")


def init_params(graph: NetworkGraph, seed, dtype=np.float32) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases; a pure function of (graph, seed)."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in graph.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 2:
            fan_in = shape[0]
        else:
            fan_in = int(np.prod(shape[1:]))
        params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return params


def run(graph: NetworkGraph, tape: Tape, x_node, params) -> dict:
    """Execute every layer on `tape`; returns ``{node name: tape node}``."""
    nodes = {"input": x_node}
    pnodes = {}

    def p(name):
        if name not in pnodes:
            try:
                value = params[name]
            except KeyError:
                raise ContractError(f"missing parameter {name!r}") from None
            pnodes[name] = tape.leaf(value, param=name)
        return pnodes[name]

    for lay in graph.layers:
        ins = [nodes[i] for i in lay.inputs]
        a = lay.attrs
        try:
            if lay.kind == "conv":
                out = L.t_conv(tape, ins[0], p(lay.name + ".w"), p(lay.name + ".b"), a["spec"])
            elif lay.kind == "dense":
                out = L.t_dense(tape, ins[0], p(lay.name + ".w"), p(lay.name + ".b"))
            elif lay.kind == "pool":
                out = L.t_pool(tape, ins[0], a.get("window", 2), a.get("stride"))
            elif lay.kind == "relu":
                out = L.t_relu(tape, ins[0])
            elif lay.kind == "softmax":
                out = L.t_softmax(tape, ins[0])
            elif lay.kind == "flatten":
                out = L.t_flatten(tape, ins[0])
            elif lay.kind == "add":
                out = L.t_add(tape, ins[0], ins[1])
            elif lay.kind == "concat":
                out = L.t_concat(tape, ins, axis=1)
            else:
                out = L.t_crop(tape, ins[0], tuple(slice(lo, hi) for lo, hi in a["region"]))
        except ShapeError as exc:
            raise ShapeError(f"layer {lay.name!r} ({lay.kind}): {exc}") from None
        nodes[lay.name] = out
    return nodes


def _input_leaf(graph, tape, x):
    x = np.asarray(x)
    if x.shape[1:] != graph.input_shape:
        raise ShapeError(f"input shape {x.shape[1:]} does not match graph input {graph.input_shape}")
    return tape.leaf(x)


def forward(graph: NetworkGraph, x, params, tape: Tape | None = None):
    """Run the graph on a batch; returns ``(output array, tape)``."""
    tape = Tape() if tape is None else tape
    nodes = run(graph, tape, _input_leaf(graph, tape, x), params)
    return nodes[graph.output].value, tape


def layer_outputs(graph: NetworkGraph, x, params) -> dict[str, np.ndarray]:
    tape = Tape()
    nodes = run(graph, tape, _input_leaf(graph, tape, x), params)
    return {name: node.value for name, node in nodes.items()}


def forward_loss(graph: NetworkGraph, x, params, labels=None, weights=None):
    """Forward plus a scalar loss node; returns ``(loss node, tape)``.

    With `labels`: mean softmax cross-entropy on the logits.  Otherwise the
    loss is ``sum(weights * output)``.
    """
    tape = Tape()
    nodes = run(graph, tape, _input_leaf(graph, tape, x), params)
    if labels is not None:
        loss, _ = L.t_softmax_ce(tape, nodes[graph.logits_layer], labels)
    else:
        if weights is None:
            raise ContractError("forward_loss needs labels or weights")
        loss = L.t_weighted_sum(tape, nodes[graph.output], weights)
    return loss, tape


def predict(graph: NetworkGraph, x, params, batch_size: int = 256) -> np.ndarray:
    """Class probabilities for `x`, evaluated in batches."""
    x = np.asarray(x)
    outs = [forward(graph, x[i:i + batch_size], params)[0] for i in range(0, len(x), batch_size)]
    if not outs:
        return np.zeros((0, graph.num_classes), dtype=np.float32)
    return np.concatenate(outs)
