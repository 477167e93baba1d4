"""Backbone descriptions, supernet construction, enumeration and materialisation.

A backbone config is a JSON document listing layers; composite blocks are
expanded at parse time into primitive nodes (convolutions, pooling, dense,
add, and depth-choice merges). Channel counts are symbolic expressions over
the decisions so shapes, costs and masks can all be derived from one place.
"""

from __future__ import annotations

import itertools
import json
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterator, Union

import jsonschema
import numpy as np

from micronas.autodiff import (
    Tensor,
    affine,
    avg_pool2d,
    batch_norm,
    batch_norm_inference,
    conv2d,
    conv_output_hw,
    dense,
    fake_quant,
    global_avg_pool,
    relu,
    stack,
    weighted_sum,
)

LAYER_KINDS = (
    "Input",
    "Conv2D",
    "DepthwiseSeparableBlock",
    "InvertedBottleneckBlock",
    "FullyConnected",
    "AvgPool",
    "GlobalAvgPool",
    "AddSkip",
)
DEPTH_OPTIONS = ("skip", "block")
DEFAULT_ENUM_CAP = 4096


class ConfigError(ValueError):
    """Backbone or architecture document that cannot be turned into a supernet."""


# ---------------------------------------------------------------------------
# channel expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fixed:
    n: int


@dataclass(frozen=True)
class Width:
    decision: str
    options: tuple[int, ...]


@dataclass(frozen=True)
class Mix:
    """Channel count after a depth decision: the skip path's or the block's."""

    decision: str
    skip: "ChannelExpr"
    block: "ChannelExpr"


ChannelExpr = Union[Fixed, Width, Mix]


def expr_decisions(expr: ChannelExpr) -> frozenset[str]:
    if isinstance(expr, Fixed):
        return frozenset()
    if isinstance(expr, Width):
        return frozenset([expr.decision])
    return expr_decisions(expr.skip) | expr_decisions(expr.block) | {expr.decision}


def expr_support(expr: ChannelExpr) -> tuple[int, ...]:
    if isinstance(expr, Fixed):
        return (expr.n,)
    if isinstance(expr, Width):
        return expr.options
    return tuple(sorted(set(expr_support(expr.skip)) | set(expr_support(expr.block))))


def expr_max(expr: ChannelExpr) -> int:
    return max(expr_support(expr))


def evaluate_expr(expr: ChannelExpr, selection) -> int:
    if isinstance(expr, Fixed):
        return expr.n
    if isinstance(expr, Width):
        return expr.options[selection[expr.decision]]
    branch = expr.skip if selection[expr.decision] == 0 else expr.block
    return evaluate_expr(branch, selection)


def expr_marginal(expr: ChannelExpr, z: dict[str, Tensor], memo: dict | None = None) -> tuple[tuple[int, ...], Tensor]:
    """Distribution of the channel count under independent relaxed decisions.

    Returns ``(support, probs)`` with ``probs`` a differentiable vector aligned
    with the sorted ``support``.
    """
    if memo is not None and expr in memo:
        return memo[expr]
    if isinstance(expr, Fixed):
        out = ((expr.n,), Tensor([1.0]))
    elif isinstance(expr, Width):
        out = (expr.options, z[expr.decision])
    else:
        s_sup, s_p = expr_marginal(expr.skip, z, memo)
        b_sup, b_p = expr_marginal(expr.block, z, memo)
        support = expr_support(expr)
        index = {w: i for i, w in enumerate(support)}
        embed_s = np.zeros((len(s_sup), len(support)))
        embed_b = np.zeros((len(b_sup), len(support)))
        for i, w in enumerate(s_sup):
            embed_s[i, index[w]] = 1.0
        for i, w in enumerate(b_sup):
            embed_b[i, index[w]] = 1.0
        zd = z[expr.decision]
        probs = zd[0] * (s_p.reshape(1, -1) @ embed_s).reshape(-1) + zd[1] * (b_p.reshape(1, -1) @ embed_b).reshape(-1)
        out = (support, probs)
    if memo is not None:
        memo[expr] = out
    return out


# ---------------------------------------------------------------------------
# IR types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DecisionRef:
    id: str


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel_h: int = 1
    kernel_w: int = 1
    stride: int = 1
    padding: str = "same"
    out_channels: int | DecisionRef | None = None
    expansion_channels: int | DecisionRef | None = None
    optional_depth: bool = False
    residual: bool = False
    relu: bool = False
    inputs: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"layer {self.name!r}: unknown kind {self.kind!r}")
        if self.kernel_h <= 0 or self.kernel_w <= 0 or self.stride <= 0:
            raise ConfigError(f"layer {self.name!r}: kernel and stride must be positive")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"layer {self.name!r}: padding must be 'same' or 'valid'")


@dataclass(frozen=True)
class DecisionNode:
    id: str
    kind: str  # "width" or "depth"
    options: tuple

    def __post_init__(self):
        if len(self.options) < 1:
            raise ConfigError(f"decision {self.id!r} needs at least one option")
        if self.kind == "width":
            opts = self.options
            if any(int(w) != w or w <= 0 for w in opts) or any(b <= a for a, b in zip(opts, opts[1:])):
                raise ConfigError(f"decision {self.id!r}: widths must be positive and strictly increasing")
        elif self.kind == "depth":
            if tuple(self.options) != DEPTH_OPTIONS:
                raise ConfigError(f"depth decision {self.id!r} must have options {DEPTH_OPTIONS}")
        else:
            raise ConfigError(f"decision {self.id!r}: unknown kind {self.kind!r}")

    @property
    def num_options(self) -> int:
        return len(self.options)


@dataclass(frozen=True)
class Node:
    """Primitive op in the expanded graph."""

    id: str
    op: str  # input | conv | dwconv | dense | avgpool | gap | add | choice
    inputs: tuple[str, ...]
    layer: str
    out_channels: ChannelExpr
    out_hw: tuple[int, int] | None  # None for dense outputs
    kernel: tuple[int, int] = (1, 1)
    stride: int = 1
    padding: str = "same"
    norm: bool = False
    relu: bool = False
    presence: tuple[tuple[str, int], ...] = ()
    decision: str | None = None  # depth decision merged by a choice node

    @property
    def is_compute(self) -> bool:
        return self.op not in ("input", "choice")

    @property
    def has_params(self) -> bool:
        return self.op in ("conv", "dwconv", "dense")


class ArchSelection(dict):
    """Mapping ``decision_id -> option index`` covering every decision."""

    def __hash__(self):
        return hash(tuple(sorted(self.items())))

    def key(self) -> tuple:
        return tuple(sorted(self.items()))


@dataclass(frozen=True)
class Supernet:
    name: str
    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    decisions: tuple[DecisionNode, ...]
    nodes: tuple[Node, ...]
    channel_grid: int | None = None
    normalization: str = "affine"

    @cached_property
    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def decision_map(self) -> dict[str, DecisionNode]:
        return {d.id: d for d in self.decisions}

    @property
    def output(self) -> Node:
        return self.nodes[-1]

    def node(self, node_id: str) -> Node:
        return self.node_map[node_id]

    def decision(self, decision_id: str) -> DecisionNode:
        return self.decision_map[decision_id]

    def input_exprs(self, node: Node) -> list[ChannelExpr]:
        return [self.node_map[i].out_channels for i in node.inputs]

    def tensor_shape(self, node: Node, channels: int) -> tuple[int, ...]:
        return (channels,) if node.out_hw is None else (*node.out_hw, channels)

    def max_shape(self, node_id: str) -> tuple[int, ...]:
        node = self.node_map[node_id]
        return self.tensor_shape(node, expr_max(node.out_channels))

    def check_selection(self, selection) -> ArchSelection:
        missing = [d.id for d in self.decisions if d.id not in selection]
        if missing:
            raise ValueError(f"selection is partial; missing {missing}")
        extra = set(selection) - set(self.decision_map)
        if extra:
            raise ValueError(f"selection names unknown decisions {sorted(extra)}")
        for d in self.decisions:
            k = selection[d.id]
            if not 0 <= int(k) < d.num_options:
                raise ValueError(f"decision {d.id!r}: option {k} out of range")
        return ArchSelection({d.id: int(selection[d.id]) for d in self.decisions})

    def present(self, node: Node, selection) -> bool:
        return all(selection[d] == k for d, k in node.presence)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _load_schema(name: str) -> dict:
    return json.loads(resources.files("micronas").joinpath("schemas", name).read_text())


def load_document(source) -> dict:
    if isinstance(source, dict):
        return source
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        return json.loads(Path(source).read_text())
    return json.loads(source)


def _channels(
    layer: dict, key: str, decisions: dict[str, DecisionNode], decision_id: str, grid: int | None
) -> int | DecisionRef | None:
    spec = layer.get(key)
    if spec is None:
        return None
    if "fixed" in spec:
        return int(spec["fixed"])
    if "ref" in spec:
        ref = spec["ref"]
        if ref not in decisions or decisions[ref].kind != "width":
            raise ConfigError(f"{decision_id}: reference to unknown width decision {ref!r}")
        return DecisionRef(ref)
    options = tuple(int(w) for w in spec["options"])
    if grid:
        bad = [w for w in options if w % grid]
        if bad:
            raise ConfigError(f"{decision_id}: channel options {bad} are not multiples of {grid}")
    if decision_id in decisions:
        raise ConfigError(f"duplicate decision id {decision_id!r}")
    decisions[decision_id] = DecisionNode(decision_id, "width", options)
    return DecisionRef(decision_id)


class _Builder:
    def __init__(self, input_shape, decisions):
        self.decisions = decisions
        self.nodes: list[Node] = []
        self.by_id: dict[str, Node] = {}
        h, w, c = input_shape
        self._add(Node("input", "input", (), "input", Fixed(int(c)), (int(h), int(w))))

    def _add(self, node: Node) -> Node:
        if node.id in self.by_id:
            raise ConfigError(f"duplicate node id {node.id!r}")
        self.nodes.append(node)
        self.by_id[node.id] = node
        return node

    def expr(self, value) -> ChannelExpr:
        if isinstance(value, DecisionRef):
            d = self.decisions[value.id]
            return Width(d.id, tuple(int(w) for w in d.options))
        return Fixed(int(value))

    def conv(self, nid, layer, src: Node, out: ChannelExpr, kernel, stride, padding, depthwise, norm, act, presence):
        if src.out_hw is None:
            raise ConfigError(f"{nid}: convolution after a dense layer")
        try:
            hw = conv_output_hw(*src.out_hw, *kernel, stride, padding)
        except ValueError as exc:
            raise ConfigError(f"{nid}: unresolvable shape ({exc})") from None
        return self._add(
            Node(
                nid,
                "dwconv" if depthwise else "conv",
                (src.id,),
                layer.name,
                src.out_channels if depthwise else out,
                hw,
                kernel=kernel,
                stride=stride,
                padding=padding,
                norm=norm,
                relu=act,
                presence=presence,
            )
        )

    def block(self, layer: LayerSpec, src: Node, presence) -> Node:
        k = (layer.kernel_h, layer.kernel_w)
        n = layer.name
        if layer.kind == "Conv2D":
            out = self.expr(layer.out_channels)
            return self.conv(f"{n}.conv", layer, src, out, k, layer.stride, layer.padding, False, True, True, presence)
        if layer.kind == "DepthwiseSeparableBlock":
            dw = self.conv(f"{n}.dw", layer, src, None, k, layer.stride, layer.padding, True, True, True, presence)
            out = self.expr(layer.out_channels)
            return self.conv(f"{n}.pw", layer, dw, out, (1, 1), 1, "same", False, True, True, presence)
        if layer.kind == "InvertedBottleneckBlock":
            exp = self.expr(layer.expansion_channels)
            e = self.conv(f"{n}.expand", layer, src, exp, (1, 1), 1, "same", False, True, True, presence)
            dw = self.conv(f"{n}.dw", layer, e, None, k, layer.stride, layer.padding, True, True, True, presence)
            if layer.residual:
                if layer.stride != 1:
                    raise ConfigError(f"{n}: residual IBN blocks need stride 1")
                out = src.out_channels
            else:
                out = self.expr(layer.out_channels)
            proj = self.conv(f"{n}.project", layer, dw, out, (1, 1), 1, "same", False, True, False, presence)
            if layer.residual:
                return self._add(Node(f"{n}.add", "add", (src.id, proj.id), n, out, proj.out_hw, presence=presence))
            return proj
        raise ConfigError(f"{n}: kind {layer.kind} cannot be depth-optional")

    def layer(self, layer: LayerSpec, srcs: list[Node]) -> Node:
        n = layer.name
        src = srcs[0]
        if layer.kind == "AddSkip":
            if len(srcs) != 2:
                raise ConfigError(f"{n}: AddSkip needs exactly two inputs")
            a, b = srcs
            if a.out_channels != b.out_channels or a.out_hw != b.out_hw:
                raise ConfigError(f"{n}: AddSkip inputs have different shapes")
            return self._add(Node(f"{n}.add", "add", (a.id, b.id), n, a.out_channels, a.out_hw))
        if len(srcs) != 1:
            raise ConfigError(f"{n}: {layer.kind} takes one input")
        if layer.kind == "AvgPool":
            if src.out_hw is None:
                raise ConfigError(f"{n}: pooling after a dense layer")
            try:
                hw = conv_output_hw(*src.out_hw, layer.kernel_h, layer.kernel_w, layer.stride, layer.padding)
            except ValueError as exc:
                raise ConfigError(f"{n}: unresolvable shape ({exc})") from None
            return self._add(
                Node(
                    f"{n}.pool", "avgpool", (src.id,), n, src.out_channels, hw,
                    kernel=(layer.kernel_h, layer.kernel_w), stride=layer.stride, padding=layer.padding,
                )
            )
        if layer.kind == "GlobalAvgPool":
            if src.out_hw is None:
                raise ConfigError(f"{n}: pooling after a dense layer")
            return self._add(Node(f"{n}.gap", "gap", (src.id,), n, src.out_channels, (1, 1)))
        if layer.kind == "FullyConnected":
            out = self.expr(layer.out_channels)
            return self._add(Node(f"{n}.fc", "dense", (src.id,), n, out, None, relu=layer.relu, norm=False))
        if not layer.optional_depth:
            return self.block(layer, src, ())
        d = self.decisions[f"{n}.depth"]
        body = self.block(layer, src, ((d.id, 1),))
        if expr_max(body.out_channels) != expr_max(src.out_channels):
            raise ConfigError(f"{n}: depth-optional block must keep the maximum channel count")
        if layer.stride > 1:
            s = layer.stride
            skip = self._add(
                Node(
                    f"{n}.pool", "avgpool", (src.id,), n, src.out_channels, body.out_hw,
                    kernel=(s, s), stride=s, padding="same", presence=((d.id, 0),),
                )
            )
        else:
            skip = src
        if skip.out_hw != body.out_hw:
            raise ConfigError(f"{n}: skip path and block disagree on spatial size")
        return self._add(
            Node(
                f"{n}.choice", "choice", (skip.id, body.id), n,
                Mix(d.id, skip.out_channels, body.out_channels), body.out_hw, decision=d.id,
            )
        )


def _layer_from_doc(i: int, doc: dict, decisions: dict, grid: int | None) -> LayerSpec:
    kind = doc["kind"]
    name = doc.get("name", f"layer{i}")
    kernel = doc.get("kernel", [1, 1])
    default_pad = "valid" if kind == "AvgPool" else "same"
    out = _channels(doc, "channels", decisions, f"{name}.width", grid)
    expansion = _channels(doc, "expansion", decisions, f"{name}.expansion", grid)
    if kind in ("Conv2D", "DepthwiseSeparableBlock", "FullyConnected") and out is None:
        raise ConfigError(f"layer {name!r}: {kind} needs 'channels'")
    if kind == "InvertedBottleneckBlock":
        if expansion is None:
            raise ConfigError(f"layer {name!r}: IBN needs 'expansion'")
        if out is None and not doc.get("residual", False):
            raise ConfigError(f"layer {name!r}: non-residual IBN needs 'channels'")
        if out is not None and doc.get("residual", False):
            raise ConfigError(f"layer {name!r}: residual IBN keeps its input width; drop 'channels'")
    if doc.get("optional_depth", False):
        if kind not in ("Conv2D", "DepthwiseSeparableBlock", "InvertedBottleneckBlock"):
            raise ConfigError(f"layer {name!r}: {kind} cannot be depth-optional")
        decisions[f"{name}.depth"] = DecisionNode(f"{name}.depth", "depth", DEPTH_OPTIONS)
    return LayerSpec(
        name=name,
        kind=kind,
        kernel_h=int(kernel[0]),
        kernel_w=int(kernel[1]),
        stride=int(doc.get("stride", 1)),
        padding=doc.get("padding", default_pad),
        out_channels=out,
        expansion_channels=expansion,
        optional_depth=bool(doc.get("optional_depth", False)),
        residual=bool(doc.get("residual", False)),
        relu=bool(doc.get("relu", False)),
        inputs=tuple(doc.get("inputs", ())),
    )


def _topo_layers(layers: list[LayerSpec]) -> list[tuple[LayerSpec, tuple[str, ...]]]:
    """Resolve each layer's inputs (default: the previous layer) and order them."""
    names = [l.name for l in layers]
    if len(set(names)) != len(names):
        raise ConfigError("layer names must be unique")
    resolved = {}
    for i, layer in enumerate(layers):
        if layer.inputs:
            unknown = [s for s in layer.inputs if s != "input" and s not in names]
            if unknown:
                raise ConfigError(f"layer {layer.name!r} references unknown inputs {unknown}")
            resolved[layer.name] = layer.inputs
        else:
            resolved[layer.name] = ("input",) if i == 0 else (names[i - 1],)
    order, state = [], {}

    def visit(name, path):
        if state.get(name) == "done":
            return
        if state.get(name) == "active":
            raise ConfigError(f"cyclic layer graph through {' -> '.join(path + [name])}")
        state[name] = "active"
        for src in resolved[name]:
            if src != "input":
                visit(src, path + [name])
        state[name] = "done"
        order.append(name)

    for name in names:
        visit(name, [])
    by_name = {l.name: l for l in layers}
    return [(by_name[n], resolved[n]) for n in order]


def parse_backbone_config(source) -> Supernet:
    """Build a :class:`Supernet` from a backbone config (dict, JSON text or path)."""
    doc = load_document(source)
    try:
        jsonschema.validate(doc, _load_schema("backbone.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"schema violation at {list(exc.absolute_path)}: {exc.message}") from None
    grid = doc.get("channel_grid")
    decisions: dict[str, DecisionNode] = {}
    raw_layers = list(doc["layers"])
    if raw_layers and raw_layers[0]["kind"] == "Input":
        given = raw_layers.pop(0).get("shape")
        if given is not None and list(given) != list(doc["input_shape"]):
            raise ConfigError("Input layer shape disagrees with input_shape")
    head = doc.get("head")
    if head is not None:
        raw_layers.extend(head if isinstance(head, list) else [head])
    if any(l["kind"] == "Input" for l in raw_layers):
        raise ConfigError("Input may only appear as the first layer")
    layers = [_layer_from_doc(i, l, decisions, grid) for i, l in enumerate(raw_layers)]
    builder = _Builder(doc["input_shape"], decisions)
    outputs: dict[str, Node] = {"input": builder.nodes[0]}
    for layer, srcs in _topo_layers(layers):
        outputs[layer.name] = builder.layer(layer, [outputs[s] for s in srcs])
    # unused branches would silently drop compute from the cost model
    consumed = {i for n in builder.nodes for i in n.inputs}
    dangling = [n.id for n in builder.nodes[:-1] if n.id not in consumed]
    if dangling:
        raise ConfigError(f"graph has more than one output: {dangling}")
    return Supernet(
        name=doc.get("name", "supernet"),
        input_shape=tuple(int(v) for v in doc["input_shape"]),
        layers=tuple(layers),
        decisions=tuple(decisions.values()),
        nodes=tuple(builder.nodes),
        channel_grid=grid,
        normalization=doc.get("normalization", "affine"),
    )


# ---------------------------------------------------------------------------
# architecture documents
# ---------------------------------------------------------------------------

_ARCH_KINDS = {"Conv2D", "DepthwiseSeparableBlock", "InvertedBottleneckBlock", "FullyConnected", "AvgPool", "GlobalAvgPool", "AddSkip"}


def architecture_to_config(doc: dict) -> dict:
    """Translate an architecture document (fixed h/w/c/s per layer) into a backbone config."""
    try:
        jsonschema.validate(doc, _load_schema("architecture.schema.json"))
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"schema violation at {list(exc.absolute_path)}: {exc.message}") from None
    layers = []
    for i, l in enumerate(doc["layers"]):
        kind = l["kind"]
        out = {"kind": kind, "name": l.get("name", f"layer{i}")}
        if "inputs" in l:
            out["inputs"] = list(l["inputs"])
        if kind in ("Conv2D", "DepthwiseSeparableBlock", "InvertedBottleneckBlock", "AvgPool"):
            out["kernel"] = [l["h"], l["w"]]
            out["stride"] = l.get("s", 1)
            if "padding" in l:
                out["padding"] = l["padding"]
        if kind in ("Conv2D", "DepthwiseSeparableBlock", "FullyConnected") or (
            kind == "InvertedBottleneckBlock" and not l.get("residual", False)
        ):
            out["channels"] = {"fixed": l["c"]}
        if kind == "InvertedBottleneckBlock":
            out["expansion"] = {"fixed": l["e"]}
            out["residual"] = l.get("residual", False)
        if kind == "FullyConnected" and l.get("relu"):
            out["relu"] = True
        layers.append(out)
    cfg = {"name": doc.get("name", "architecture"), "input_shape": list(doc["input_shape"]), "layers": layers}
    if doc.get("channel_grid") is not None:
        cfg["channel_grid"] = doc["channel_grid"]
    if "normalization" in doc:
        cfg["normalization"] = doc["normalization"]
    return cfg


def parse_architecture(source) -> Supernet:
    """Decision-free supernet from an architecture document."""
    return parse_backbone_config(architecture_to_config(load_document(source)))


def export_architecture(supernet: Supernet, selection=None) -> dict:
    """Architecture document for the network picked out by ``selection``.

    Skipped downsampling blocks become ``AvgPool`` layers; skipped stride-1
    blocks disappear. Default-valued fields are omitted so that
    ``export_architecture(parse_architecture(doc)) == doc`` for documents in
    this canonical form.
    """
    selection = supernet.check_selection(selection or {})
    nodes = supernet.node_map
    kept, rename = [], {}
    for layer in supernet.layers:
        skipped = layer.optional_depth and selection[f"{layer.name}.depth"] == 0
        if skipped and layer.stride == 1:
            rename[layer.name] = None
            continue
        kept.append((layer, skipped))
    previous = "input"
    resolved_inputs = {}
    for layer in supernet.layers:
        srcs = list(layer.inputs) if layer.inputs else [previous]
        srcs = [_follow(rename, resolved_inputs, s) for s in srcs]
        resolved_inputs[layer.name] = srcs
        previous = layer.name

    out_layers = []
    prev_kept = "input"
    for i, (layer, skipped) in enumerate(kept):
        entry: dict = {}
        if layer.name != f"layer{i}":
            entry["name"] = layer.name
        srcs = resolved_inputs[layer.name]
        if srcs != [prev_kept]:
            entry["inputs"] = srcs
        if skipped:
            s = layer.stride
            entry.update({"kind": "AvgPool", "h": s, "w": s, "s": s, "padding": "same"})
        elif layer.kind == "AvgPool":
            entry.update({"kind": "AvgPool", "h": layer.kernel_h, "w": layer.kernel_w, "s": layer.stride})
            if layer.padding != "valid":
                entry["padding"] = layer.padding
        elif layer.kind in ("GlobalAvgPool", "AddSkip"):
            entry["kind"] = layer.kind
        elif layer.kind == "FullyConnected":
            entry.update({"kind": "FullyConnected", "c": evaluate_expr(nodes[f"{layer.name}.fc"].out_channels, selection)})
            if layer.relu:
                entry["relu"] = True
        else:
            last = {"Conv2D": "conv", "DepthwiseSeparableBlock": "pw", "InvertedBottleneckBlock": "project"}[layer.kind]
            entry.update(
                {
                    "kind": layer.kind,
                    "h": layer.kernel_h,
                    "w": layer.kernel_w,
                    "c": evaluate_expr(nodes[f"{layer.name}.{last}"].out_channels, selection),
                    "s": layer.stride,
                }
            )
            if layer.padding != "same":
                entry["padding"] = layer.padding
            if layer.kind == "InvertedBottleneckBlock":
                entry["e"] = evaluate_expr(nodes[f"{layer.name}.expand"].out_channels, selection)
                if layer.residual:
                    entry["residual"] = True
                    del entry["c"]
        out_layers.append(_order_keys(entry))
        prev_kept = layer.name
    doc = {"name": supernet.name, "input_shape": list(supernet.input_shape), "layers": out_layers}
    if supernet.channel_grid is not None:
        doc["channel_grid"] = supernet.channel_grid
    if supernet.normalization != "affine":
        doc["normalization"] = supernet.normalization
    return doc


_KEY_ORDER = ("name", "kind", "inputs", "h", "w", "c", "e", "s", "padding", "residual", "relu")


def _order_keys(entry: dict) -> dict:
    return {k: entry[k] for k in _KEY_ORDER if k in entry}


def _follow(rename, resolved_inputs, name):
    while name in rename and rename[name] is None:
        srcs = resolved_inputs[name]
        if len(srcs) != 1:
            break
        name = srcs[0]
    return name


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------


def count_architectures(supernet: Supernet) -> int:
    return int(np.prod([d.num_options for d in supernet.decisions], dtype=object)) if supernet.decisions else 1


def enumerate_architectures(supernet: Supernet, cap: int = DEFAULT_ENUM_CAP) -> Iterator[ArchSelection]:
    """Every total assignment exactly once, in lexicographic option order."""
    total = count_architectures(supernet)
    if total > cap:
        raise ValueError(f"{total} architectures exceed the enumeration cap of {cap}")
    ids = [d.id for d in supernet.decisions]
    for combo in itertools.product(*(range(d.num_options) for d in supernet.decisions)):
        yield ArchSelection(zip(ids, combo))


def min_resource_selection(supernet: Supernet) -> ArchSelection:
    """Narrowest width everywhere and every optional block skipped."""
    return ArchSelection({d.id: 0 for d in supernet.decisions})


def max_selection(supernet: Supernet) -> ArchSelection:
    return ArchSelection({d.id: d.num_options - 1 for d in supernet.decisions})


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


@dataclass
class QuantConfig:
    weight_bits: int = 8
    activation_bits: int = 8


def one_hot(supernet: Supernet, selection) -> dict[str, Tensor]:
    selection = supernet.check_selection(selection)
    z = {}
    for d in supernet.decisions:
        v = np.zeros(d.num_options)
        v[selection[d.id]] = 1.0
        z[d.id] = Tensor(v)
    return z


class SupernetModel:
    """Executable supernet holding shared max-width parameters.

    ``forward(x, z)`` evaluates every width decision once at its maximum width
    and applies the decision-weighted channel mask; depth decisions blend the
    skip path and the block with their weights.

    Normalised nodes apply a per-channel scale and shift. With
    ``normalization == "batch"`` they first standardise with batch statistics
    in training mode and with running estimates (kept in ``buffers``) in eval
    mode.
    """

    bn_momentum = 0.1

    def __init__(
        self,
        supernet: Supernet,
        seed: int = 0,
        params: dict[str, Tensor] | None = None,
        buffers: dict[str, np.ndarray] | None = None,
    ):
        self.supernet = supernet
        self.quant: QuantConfig | None = None
        self.training = True
        self.params = params if params is not None else self._init_params(np.random.default_rng(seed))
        self.buffers = buffers if buffers is not None else self._init_buffers()
        self.recorded_shapes: dict[str, tuple[int, ...]] = {}

    def _init_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        if self.supernet.normalization != "batch":
            return out
        for node in self.supernet.nodes:
            if node.norm:
                c = expr_max(node.out_channels)
                out[f"{node.id}.running_mean"] = np.zeros(c)
                out[f"{node.id}.running_var"] = np.ones(c)
        return out

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    @contextmanager
    def evaluating(self):
        prev = self.training
        self.training = False
        try:
            yield self
        finally:
            self.training = prev

    def _init_params(self, rng) -> dict[str, Tensor]:
        params = {}
        net = self.supernet
        for node in net.nodes:
            if not node.has_params:
                continue
            cin = expr_max(net.node_map[node.inputs[0]].out_channels)
            cout = expr_max(node.out_channels)
            if node.op == "conv":
                kh, kw = node.kernel
                shape, fan_in = (kh, kw, cin, cout), kh * kw * cin
            elif node.op == "dwconv":
                kh, kw = node.kernel
                shape, fan_in = (kh, kw, 1, cin), kh * kw
            else:
                src = net.node_map[node.inputs[0]]
                rows = cin if src.out_hw is None else src.out_hw[0] * src.out_hw[1] * cin
                shape, fan_in = (rows, cout), rows
            gain = 2.0 if node.relu or node.norm else 1.0
            params[f"{node.id}.weight"] = Tensor(rng.normal(0.0, np.sqrt(gain / fan_in), size=shape), requires_grad=True)
            params[f"{node.id}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
            if node.norm:
                params[f"{node.id}.scale"] = Tensor(np.ones(cout), requires_grad=True)
                params[f"{node.id}.shift"] = Tensor(np.zeros(cout), requires_grad=True)
        return params

    # -- quantisation ------------------------------------------------------
    def enable_quantization(self, quant: QuantConfig, calibration: np.ndarray):
        """Attach learnable fake-quant ranges, initialised from one calibration batch."""
        self.quant = None
        acts = self._activation_ranges(calibration)
        for node in self.supernet.nodes:
            if node.has_params:
                w = self.params[f"{node.id}.weight"].data
                m = max(float(np.abs(w).max()), 1e-3)
                self.params.setdefault(f"{node.id}.wq_min", Tensor(-m, requires_grad=True))
                self.params.setdefault(f"{node.id}.wq_max", Tensor(m, requires_grad=True))
        for nid, (lo, hi) in acts.items():
            lo, hi = min(lo, 0.0), max(hi, 0.0)
            if hi - lo < 1e-3:
                hi = lo + 1e-3
            self.params.setdefault(f"{nid}.aq_min", Tensor(lo, requires_grad=True))
            self.params.setdefault(f"{nid}.aq_max", Tensor(hi, requires_grad=True))
        self.quant = quant

    def disable_quantization(self):
        self.quant = None

    def _activation_ranges(self, x: np.ndarray) -> dict[str, tuple[float, float]]:
        ranges = {}
        z = {d.id: Tensor(np.eye(d.num_options)[-1]) for d in self.supernet.decisions}
        self._run(Tensor(x), z, ranges, batch_stats=True)
        return ranges

    def _quant_act(self, nid: str, t: Tensor) -> Tensor:
        if self.quant is None:
            return t
        return fake_quant(t, self.quant.activation_bits, self.params[f"{nid}.aq_min"], self.params[f"{nid}.aq_max"])

    def _weight(self, nid: str) -> Tensor:
        w = self.params[f"{nid}.weight"]
        if self.quant is None:
            return w
        return fake_quant(w, self.quant.weight_bits, self.params[f"{nid}.wq_min"], self.params[f"{nid}.wq_max"], symmetric=True)

    # -- forward -----------------------------------------------------------
    def forward(self, x, z: dict[str, Tensor] | None = None, record_shapes: bool = False) -> Tensor:
        z = self._check_z(z)
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != self.supernet.input_shape:
            raise ValueError(f"input shape {x.shape[1:]} does not match {self.supernet.input_shape}")
        return self._run(x, z, None, record_shapes)

    __call__ = forward

    def _check_z(self, z) -> dict[str, Tensor]:
        z = dict(z or {})
        for d in self.supernet.decisions:
            if d.id not in z:
                raise ValueError(f"missing decision weights for {d.id!r}")
            z[d.id] = z[d.id] if isinstance(z[d.id], Tensor) else Tensor(z[d.id])
            if z[d.id].shape != (d.num_options,):
                raise ValueError(f"decision {d.id!r} needs {d.num_options} weights")
        return z

    def _run(self, x: Tensor, z, ranges=None, record_shapes=False, batch_stats=None) -> Tensor:
        net = self.supernet
        p = self.params
        memo: dict = {}
        use_batch = self.training if batch_stats is None else batch_stats
        update = self.training and batch_stats is None
        values: dict[str, Tensor] = {"input": self._quant_act("input", x)}
        if ranges is not None:
            ranges["input"] = (float(x.data.min()), float(x.data.max()))
        for node in net.nodes[1:]:
            srcs = [values[i] for i in node.inputs]
            if node.op in ("conv", "dwconv"):
                groups = srcs[0].shape[-1] if node.op == "dwconv" else 1
                y = conv2d(srcs[0], self._weight(node.id), p[f"{node.id}.bias"], node.stride, node.padding, groups)
            elif node.op == "dense":
                y = dense(srcs[0], self._weight(node.id), p[f"{node.id}.bias"])
            elif node.op == "avgpool":
                y = avg_pool2d(srcs[0], node.kernel, node.stride, node.padding)
            elif node.op == "gap":
                y = global_avg_pool(srcs[0])
            elif node.op == "add":
                y = srcs[0] + srcs[1]
            elif node.op == "choice":
                y = weighted_sum(srcs, z[node.decision])
            else:  # pragma: no cover - parser emits only the ops above
                raise ValueError(node.op)
            if node.norm:
                y = self._norm(node.id, y, use_batch, update)
            if node.relu:
                y = relu(y)
            if node.has_params and expr_decisions(node.out_channels):
                y = y * _soft_mask(node.out_channels, z, memo, y.shape[-1])
            if node.has_params or node.op == "add":
                if ranges is not None:
                    ranges[node.id] = (float(y.data.min()), float(y.data.max()))
                elif node is not net.output:
                    y = self._quant_act(node.id, y)
            if record_shapes:
                self.recorded_shapes[node.id] = y.shape[1:]
            values[node.id] = y
        return values[net.output.id]

    def _norm(self, nid: str, y: Tensor, use_batch: bool, update: bool) -> Tensor:
        scale, shift = self.params[f"{nid}.scale"], self.params[f"{nid}.shift"]
        if self.supernet.normalization == "affine":
            return affine(y, scale, shift)
        rm, rv = f"{nid}.running_mean", f"{nid}.running_var"
        if not use_batch:
            return batch_norm_inference(y, scale, shift, self.buffers[rm], self.buffers[rv])
        out, mean, var = batch_norm(y, scale, shift)
        if update:
            m = self.bn_momentum
            self.buffers[rm] = (1 - m) * self.buffers[rm] + m * mean
            self.buffers[rv] = (1 - m) * self.buffers[rv] + m * var
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def copy(self) -> "SupernetModel":
        clone = SupernetModel(
            self.supernet,
            params={k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
        )
        clone.quant = self.quant
        clone.training = self.training
        return clone

    def num_parameters(self, include_quant: bool = False) -> int:
        return sum(
            v.data.size for k, v in self.params.items() if include_quant or not (".wq_" in k or ".aq_" in k)
        )


def _soft_mask(expr: ChannelExpr, z, memo, channels: int) -> Tensor:
    """Per-channel keep-probability: sum_w P(width = w) * [c < w]."""
    support, probs = expr_marginal(expr, z, memo)
    masks = []
    for w in support:
        m = np.zeros(channels)
        m[:w] = 1.0
        masks.append(Tensor(m))
    return weighted_sum(masks, probs)


def build_supernet(supernet: Supernet, seed: int = 0) -> SupernetModel:
    return SupernetModel(supernet, seed=seed)


# ---------------------------------------------------------------------------
# materialisation
# ---------------------------------------------------------------------------


def materialize(model: SupernetModel, selection) -> tuple[SupernetModel, dict]:
    """Discrete network with physically truncated weights, plus its architecture document."""
    net = model.supernet
    selection = net.check_selection(selection)
    doc = export_architecture(net, selection)
    discrete = parse_architecture(doc)
    params = {}
    for node in discrete.nodes:
        if not node.has_params:
            continue
        src = net.node_map[node.id]
        src_in = net.node_map[src.inputs[0]]
        for suffix in ("weight", "bias", "scale", "shift"):
            key = f"{node.id}.{suffix}"
            if key not in model.params:
                continue
            full = model.params[key].data
            cout = expr_max(node.out_channels)
            if suffix != "weight":
                params[key] = Tensor(full[:cout], requires_grad=True)
            elif node.op == "dense":
                cin = evaluate_expr(src_in.out_channels, selection)
                cmax = expr_max(src_in.out_channels)
                if src_in.out_hw is None:
                    params[key] = Tensor(full[:cin, :cout], requires_grad=True)
                else:
                    h, w = src_in.out_hw
                    params[key] = Tensor(full.reshape(h, w, cmax, -1)[:, :, :cin, :cout].reshape(h * w * cin, cout), requires_grad=True)
            elif node.op == "dwconv":
                params[key] = Tensor(full[:, :, :, :cout], requires_grad=True)
            else:
                cin = evaluate_expr(src_in.out_channels, selection)
                params[key] = Tensor(full[:, :, :cin, :cout], requires_grad=True)
        for suffix in ("wq_min", "wq_max"):
            key = f"{node.id}.{suffix}"
            if key in model.params:
                params[key] = Tensor(model.params[key].data, requires_grad=True)
    for key, t in model.params.items():
        if (".aq_" in key) and key.split(".aq_")[0] in discrete.node_map:
            params[key] = Tensor(t.data, requires_grad=True)
    buffers = {}
    for key, v in model.buffers.items():
        nid = key.rsplit(".", 1)[0]
        if nid in discrete.node_map:
            buffers[key] = v[: expr_max(discrete.node_map[nid].out_channels)].copy()
    out = SupernetModel(discrete, params=params, buffers=buffers)
    out.quant = model.quant
    out.training = model.training
    return out, doc
