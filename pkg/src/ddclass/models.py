"""Architecture builders and the two decomposed-model assemblies.

* ``scale_local`` / ``assemble_cnn_dnn``: width-scaled local CNNs, one per
  tile, joined by a dense head on their concatenated class probabilities.
* ``channel_decompose`` / ``assemble_dd_global``: a global CNN split into
  channel groups; reassembly copies each group into the block diagonal and
  leaves every cross-group weight at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decomposition import Decomposition
from .errors import ContractError, ShapeError
from .graph import Layer, NetworkGraph
from .layers import ConvSpec

DNN_HIDDEN = (128, 64, 32, 10)


class _Builder:
    def __init__(self, input_shape):
        self.layers = []
        self.shapes = {"input": tuple(input_shape)}
        self.rank = len(input_shape) - 1

    def add(self, name, kind, inputs=None, **attrs):
        inputs = tuple(inputs) if inputs is not None else (self.layers[-1].name if self.layers else "input",)
        self.layers.append(Layer(name, kind, inputs, attrs))
        return name

    def conv(self, name, src, width, kernel=3):
        cin = self._channels(src)
        spec = ConvSpec(self.rank, cin, width, kernel=kernel)
        return self.add(name, "conv", [src], spec=spec)

    def _channels(self, src):
        g = NetworkGraph(self.shapes["input"], 1, list(self.layers))
        return g.shapes()[src][0]

    def dense(self, name, src, units):
        g = NetworkGraph(self.shapes["input"], 1, list(self.layers))
        (f,) = g.shapes()[src]
        return self.add(name, "dense", [src], in_features=f, units=units)


def _check_spatial(input_shape, pools=3):
    sp = input_shape[1:]
    if len(sp) not in (2, 3):
        raise ShapeError(f"expected (C, H, W) or (C, H, W, D) input, got {input_shape}")
    if any(n < 2 ** pools for n in sp):
        raise ShapeError(f"spatial extents {sp} too small for {pools} 2x poolings")


def build_vgg9(input_shape, num_classes: int, width: int = 16) -> NetworkGraph:
    """Nine 3x3(x3) same-padded convs in three stages of widths w, 2w, 4w,
    each stage closed by a 2x max-pool, then dense(8w) and dense(K)."""
    input_shape = tuple(input_shape)
    _check_spatial(input_shape)
    b = _Builder(input_shape)
    src = "input"
    for stage in range(3):
        w = width * 2 ** stage
        for j in range(3):
            src = b.conv(f"s{stage}c{j}", src, w)
            src = b.add(f"s{stage}c{j}r", "relu")
        src = b.add(f"s{stage}pool", "pool", window=2)
    b.add("flatten", "flatten")
    b.dense("fc1", "flatten", 8 * width)
    b.add("fc1r", "relu")
    b.dense("logits", "fc1r", num_classes)
    b.add("probs", "softmax")
    g = NetworkGraph(input_shape, num_classes, b.layers)
    g.validate()
    return g


def build_resnet20(input_shape, num_classes: int, width: int = 16) -> NetworkGraph:
    """Twenty single-conv blocks with an identity skip from the input of
    block i to the input of block i+3 (i = 0, 3, ..., 15).  Widths w / 2w /
    4w for blocks 0-5 / 6-11 / 12-19 with a 2x max-pool in front of blocks
    6, 12 and 18; a 1x1 projection replaces the identity when widths differ."""
    input_shape = tuple(input_shape)
    _check_spatial(input_shape)
    b = _Builder(input_shape)
    src = "input"
    skip_from = {}
    for i in range(20):
        if i in (6, 12, 18):
            src = b.add(f"pool{i}", "pool", [src], window=2)
        if i % 3 == 0 and i + 3 <= 18:
            skip_from[i + 3] = src
        w = width * (1 if i < 6 else 2 if i < 12 else 4)
        src = b.conv(f"b{i}", src, w)
        src = b.add(f"b{i}r", "relu", [src])
        if i + 1 in skip_from:
            start = i - 2
            skip = skip_from[i + 1]
            if b._channels(skip) != w:
                skip = b.conv(f"proj{start}", skip, w, kernel=1)
            src = b.add(f"skip{start}", "add", [src, skip])
    b.add("flatten", "flatten", [src])
    b.dense("logits", "flatten", num_classes)
    b.add("probs", "softmax")
    g = NetworkGraph(input_shape, num_classes, b.layers)
    g.validate()
    return g


def build_dnn_head(num_classes: int, n_local: int, hidden=DNN_HIDDEN) -> NetworkGraph:
    """Dense aggregator: K*N local probabilities -> hidden ReLU layers -> K."""
    if num_classes < 1 or n_local < 1:
        raise ContractError("K and N must be >= 1")
    b = _Builder((num_classes * n_local,))
    src = "input"
    for i, units in enumerate(hidden):
        src = b.dense(f"h{i}", src, units)
        src = b.add(f"h{i}r", "relu")
    b.dense("logits", src, num_classes)
    b.add("probs", "softmax")
    g = NetworkGraph((num_classes * n_local,), num_classes, b.layers)
    g.validate()
    return g


def build_model(kind: str, input_shape, num_classes: int, width: int) -> NetworkGraph:
    builders = {"vgg9": build_vgg9, "resnet20": build_resnet20}
    try:
        return builders[kind](input_shape, num_classes, width)
    except KeyError:
        raise ContractError(f"unknown model {kind!r} (choose vgg9 or resnet20)") from None


def rewidth(graph: NetworkGraph, width_fn, input_shape) -> NetworkGraph:
    """Copy `graph` with every conv width and hidden dense width mapped by
    `width_fn` and a new input shape; depth, kernels and pools unchanged.
    The dense layer producing the logits keeps its K outputs."""
    g = NetworkGraph(tuple(input_shape), graph.num_classes, [])
    logits = graph.logits_layer
    for lay in graph.layers:
        shapes = g.shapes()
        attrs = dict(lay.attrs)
        if lay.kind == "conv":
            old = attrs["spec"]
            cin = shapes[lay.inputs[0]][0]
            attrs["spec"] = ConvSpec(old.rank, cin, width_fn(lay.name, old.out_channels),
                                     old.kernel, old.stride, old.padding)
        elif lay.kind == "dense":
            attrs["in_features"] = shapes[lay.inputs[0]][0]
            if lay.name != logits:
                attrs["units"] = width_fn(lay.name, lay.attrs["units"])
        g.layers.append(Layer(lay.name, lay.kind, lay.inputs, attrs))
    g.validate()
    return g


def scale_local(global_graph: NetworkGraph, n: int, tile_shape) -> NetworkGraph:
    """Local CNN for one tile: every width becomes ceil(width / n), at least 1."""
    if n < 1:
        raise ContractError("N must be >= 1")
    return rewidth(global_graph, lambda _, w: max(1, math.ceil(w / n)), tile_shape)


def widths(graph: NetworkGraph) -> dict[str, int]:
    out = {}
    for lay in graph.layers:
        if lay.kind == "conv":
            out[lay.name] = lay.attrs["spec"].out_channels
        elif lay.kind == "dense":
            out[lay.name] = lay.attrs["units"]
    return out


def _prefixed(graph: NetworkGraph, prefix: str, input_name: str):
    out = []
    for lay in graph.layers:
        ins = tuple(input_name if i == "input" else prefix + i for i in lay.inputs)
        out.append(Layer(prefix + lay.name, lay.kind, ins, dict(lay.attrs)))
    return out


def assemble_cnn_dnn(local_graphs, head: NetworkGraph, plan: Decomposition) -> NetworkGraph:
    """One connected model: tile router -> N local branches -> concat -> head.

    Branch i reads tile i of the plan; its layers and parameters are
    prefixed ``b<i>/``, the head's ``head/``.
    """
    n = plan.n
    if len(local_graphs) != n:
        raise ContractError(f"{len(local_graphs)} local networks for {n} tiles")
    k = head.num_classes
    if head.input_shape != (k * n,):
        raise ContractError(f"head input {head.input_shape} != K*N = {k * n}")
    layers = []
    outs = []
    for i, (g, tile) in enumerate(zip(local_graphs, plan.tiles)):
        if g.num_classes != k:
            raise ContractError(f"local network {i} emits {g.num_classes} classes, head expects {k}")
        if g.input_shape != plan.tile_input_shape(i):
            raise ContractError(f"local network {i} input {g.input_shape} != tile {plan.tile_input_shape(i)}")
        tname = f"tile{i}"
        layers.append(Layer(tname, "tile", ("input",), {"region": tile.region}))
        layers.extend(_prefixed(g, f"b{i}/", tname))
        outs.append(f"b{i}/{g.output}")
    layers.append(Layer("concat", "concat", tuple(outs)))
    layers.extend(_prefixed(head, "head/", "concat"))
    g = NetworkGraph((plan.channels,) + plan.shape, k, layers)
    g.validate()
    return g


def coherent_params(local_params, head_params) -> dict:
    """Parameter dict of the coherent model from pretrained locals and a head."""
    out = {}
    for i, params in enumerate(local_params):
        for name, v in params.items():
            out[f"b{i}/{name}"] = v.copy()
    for name, v in head_params.items():
        out[f"head/{name}"] = v.copy()
    return out


def branch_params(params, i: int) -> dict:
    prefix = f"b{i}/"
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass(frozen=True)
class Placement:
    global_param: str
    subnet: int
    sub_param: str
    index: tuple             # slices into the global tensor
    mode: str = "copy"       # "copy" or "mean" (averaged into the logits layer)


@dataclass
class ReassemblyMap:
    global_graph: NetworkGraph
    n: int
    placements: list = field(default_factory=list)

    def targets(self, name: str):
        return [p for p in self.placements if p.global_param == name]


def channel_decompose(global_graph: NetworkGraph, n: int):
    """Split every layer's channels (and hidden dense units) into `n` groups.

    Returns ``(subnets, map)``: `n` identical sub-networks on ``C/n`` input
    channels, and the placement of each sub-parameter inside the global
    tensors.  Input channels, conv widths and hidden dense widths must all
    be divisible by `n`.
    """
    if n < 1:
        raise ContractError("N must be >= 1")
    c = global_graph.input_shape[0]
    if c % n:
        raise ContractError(f"input channels {c} not divisible by N={n}")

    def split(name, w):
        if w % n:
            raise ContractError(f"layer {name!r} width {w} not divisible by N={n}")
        return w // n

    sub = rewidth(global_graph, split, (c // n,) + global_graph.input_shape[1:])
    sub_shapes = sub.param_shapes()
    logits = global_graph.logits_layer
    placements = []
    for i in range(n):
        for lay in global_graph.layers:
            if lay.kind not in ("conv", "dense"):
                continue
            wname, bname = lay.name + ".w", lay.name + ".b"
            ws = sub_shapes[wname]
            rows = slice(i * ws[0], (i + 1) * ws[0])
            cols = slice(i * ws[1], (i + 1) * ws[1])
            if lay.kind == "conv":
                placements.append(Placement(wname, i, wname, (rows, cols)))
                placements.append(Placement(bname, i, bname, (rows,)))
            elif lay.name == logits:
                placements.append(Placement(wname, i, wname, (rows, slice(None)), "mean"))
                placements.append(Placement(bname, i, bname, (slice(None),), "mean"))
            else:
                placements.append(Placement(wname, i, wname, (rows, cols)))
                placements.append(Placement(bname, i, bname, (cols,)))
    return [sub] * n, ReassemblyMap(global_graph, n, placements)


def assemble_dd_global(subnet_params, rmap: ReassemblyMap):
    """Global parameters from trained sub-networks: block-diagonal copies,
    zeros across groups, and the logits layer averaged over groups.

    Returns ``(global graph, params)``.
    """
    if len(subnet_params) != rmap.n:
        raise ContractError(f"{len(subnet_params)} sub-networks for a {rmap.n}-way map")
    shapes = rmap.global_graph.param_shapes()
    dtype = next(iter(subnet_params[0].values())).dtype if subnet_params[0] else np.float32
    out = {name: np.zeros(shape, dtype=dtype) for name, shape in shapes.items()}
    for pl in rmap.placements:
        try:
            src = subnet_params[pl.subnet][pl.sub_param]
        except KeyError:
            raise ContractError(f"sub-network {pl.subnet} lacks parameter {pl.sub_param!r}") from None
        dest = out[pl.global_param]
        if dest[pl.index].shape != src.shape:
            raise ContractError(
                f"{pl.sub_param!r}: sub-parameter {src.shape} does not fit {dest[pl.index].shape}"
            )
        if pl.mode == "mean":
            dest[pl.index] += src / rmap.n
        else:
            dest[pl.index] = src
    return rmap.global_graph, out
