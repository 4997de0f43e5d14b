"""Layer graph: the single model representation that is trained, pruned and counted."""

from __future__ import annotations

import copy
import enum
import graphlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from dualprune import functional as F
from dualprune.nn.masked_bn import MaskedBNState, compute_mask, mask_tensor, masked_bn_forward
from dualprune.tensor import ShapeError, Tensor


class GraphError(ValueError):
    """Structural problem in a network graph."""


class Kind(str, enum.Enum):
    INPUT = "Input"
    CONV = "Conv"
    DEPTHWISE = "DepthwiseConv"
    POINTWISE = "PointwiseConv"
    BN = "MaskedBN"
    RELU = "ReLU"
    AVGPOOL = "AvgPool"
    UPSAMPLE = "Upsample"
    ADD = "Add"
    CONCAT = "Concat"
    OUTPUT = "Output"


CONV_KINDS = (Kind.CONV, Kind.DEPTHWISE, Kind.POINTWISE)
# ops whose output channel i depends only on input channel i
CHANNELWISE_KINDS = (Kind.BN, Kind.RELU, Kind.AVGPOOL, Kind.UPSAMPLE, Kind.DEPTHWISE, Kind.OUTPUT)


@dataclass
class LayerNode:
    id: str
    kind: Kind
    inputs: list[str]
    channels: int
    attrs: dict = field(default_factory=dict)
    params: dict[str, Tensor] = field(default_factory=dict)
    bn: MaskedBNState | None = None
    tag: str = ""

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()
        if self.bn is not None:
            yield "gamma", self.bn.gamma
            yield "beta", self.bn.beta
            if self.bn.masked:
                yield "tau", self.bn.tau

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Everything persisted for this node, parameters and statistics alike."""
        for name, t in self.params.items():
            yield name, t.data
        if self.bn is not None:
            yield "gamma", self.bn.gamma.data
            yield "beta", self.bn.beta.data
            yield "tau", self.bn.tau.data
            yield "running_mean", self.bn.running_mean
            yield "running_var", self.bn.running_var

    def describe(self) -> dict:
        desc = {
            "id": self.id,
            "kind": self.kind.value,
            "inputs": list(self.inputs),
            "channels": self.channels,
            "attrs": dict(self.attrs),
            "tag": self.tag,
        }
        if self.bn is not None:
            desc["bn"] = {
                "eps": self.bn.eps,
                "momentum": self.bn.momentum,
                "epsilon_band": self.bn.epsilon_band,
                "masked": self.bn.masked,
            }
        return desc


class NetworkGraph:
    def __init__(self, nodes: list[LayerNode]):
        self.nodes: dict[str, LayerNode] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise GraphError(f"duplicate node id {node.id!r}")
            self.nodes[node.id] = node
        self.validate()

    # structure -----------------------------------------------------------

    def validate(self) -> None:
        inputs = [n.id for n in self.nodes.values() if n.kind is Kind.INPUT]
        outputs = [n.id for n in self.nodes.values() if n.kind is Kind.OUTPUT]
        if len(inputs) != 1 or len(outputs) != 1:
            raise GraphError(f"graph needs exactly one Input and one Output node, got {inputs} / {outputs}")
        self.input_id, self.output_id = inputs[0], outputs[0]

        sorter = graphlib.TopologicalSorter()
        for node in self.nodes.values():
            for src in node.inputs:
                if src not in self.nodes:
                    raise GraphError(f"node {node.id!r} references missing input {src!r}")
            sorter.add(node.id, *node.inputs)
        try:
            order = list(sorter.static_order())
        except graphlib.CycleError as exc:
            raise GraphError(f"graph has a cycle through node {exc.args[1][0]!r}") from None
        self.topo_order: list[str] = order

        for nid in order:
            self._check_node(self.nodes[nid])

    def _check_node(self, node: LayerNode) -> None:
        ins = [self.nodes[s].channels for s in node.inputs]
        arity = {Kind.INPUT: 0, Kind.ADD: 2}
        want = arity.get(node.kind, None if node.kind is Kind.CONCAT else 1)
        if want is not None and len(ins) != want:
            raise GraphError(f"node {node.id!r} ({node.kind.value}) needs {want} input(s), got {len(ins)}")
        if node.kind is Kind.CONCAT:
            if len(ins) < 2:
                raise GraphError(f"Concat node {node.id!r} needs at least two inputs")
            if node.channels != sum(ins):
                raise GraphError(f"Concat node {node.id!r} declares {node.channels} channels, inputs give {sum(ins)}")
            return
        if node.kind is Kind.ADD:
            if len(set(ins + [node.channels])) != 1:
                raise GraphError(f"Add node {node.id!r} has mismatched channels {ins} -> {node.channels}")
            return
        if node.kind is Kind.INPUT:
            return
        cin = ins[0]
        if node.kind in (Kind.CONV, Kind.POINTWISE):
            w = node.params["weight"]
            k = node.attrs["kernel"]
            if w.shape != (node.channels, cin, k, k) or node.attrs["in_channels"] != cin:
                raise GraphError(f"node {node.id!r}: weight {w.shape} inconsistent with {cin}->{node.channels}, K={k}")
        elif node.kind is Kind.DEPTHWISE:
            w = node.params["weight"]
            if node.channels != cin or w.shape != (cin, 1, node.attrs["kernel"], node.attrs["kernel"]):
                raise GraphError(f"node {node.id!r}: depthwise weight {w.shape} inconsistent with {cin} channels")
        elif node.kind is Kind.BN:
            if node.bn is None or node.bn.channels != cin or node.channels != cin:
                raise GraphError(f"node {node.id!r}: BatchNorm state does not match {cin} input channels")
        elif node.channels != cin:
            raise GraphError(f"node {node.id!r} ({node.kind.value}) must preserve channels ({cin} -> {node.channels})")
        if "bias" in node.params and node.params["bias"].shape != (node.channels,):
            raise GraphError(f"node {node.id!r}: bias shape {node.params['bias'].shape} != ({node.channels},)")

    @property
    def in_channels(self) -> int:
        return self.nodes[self.input_id].channels

    @property
    def out_channels(self) -> int:
        return self.nodes[self.output_id].channels

    @property
    def dtype(self):
        params = self.parameters()
        return params[0].dtype if params else np.dtype(np.float32)

    def consumers(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for nid in self.topo_order:
            for src in self.nodes[nid].inputs:
                out[src].append(nid)
        return out

    def bn_nodes(self, masked_only: bool = False) -> list[LayerNode]:
        nodes = [self.nodes[i] for i in self.topo_order if self.nodes[i].kind is Kind.BN]
        if masked_only:
            nodes = [n for n in nodes if n.bn.masked]
        return nodes

    def infer_shapes(self, height: int, width: int) -> dict[str, tuple[int, int, int]]:
        """Propagate (C, H, W) through the graph without touching weights."""
        shapes: dict[str, tuple[int, int, int]] = {}
        for nid in self.topo_order:
            node = self.nodes[nid]
            if node.kind is Kind.INPUT:
                shapes[nid] = (node.channels, height, width)
                continue
            ins = [shapes[s] for s in node.inputs]
            c, h, w = ins[0]
            if node.kind in CONV_KINDS:
                k, s, p = node.attrs["kernel"], node.attrs["stride"], node.attrs["padding"]
                h, w = F.conv_output_size(h, k, s, p), F.conv_output_size(w, k, s, p)
                if h < 1 or w < 1:
                    raise ShapeError(f"node {nid!r}: kernel {k} does not fit input {ins[0][1:]}")
            elif node.kind is Kind.AVGPOOL:
                f = node.attrs["factor"]
                if h % f or w % f:
                    raise ShapeError(f"node {nid!r}: spatial size {h}x{w} not divisible by pool factor {f}")
                h, w = h // f, w // f
            elif node.kind is Kind.UPSAMPLE:
                h, w = h * node.attrs["factor"], w * node.attrs["factor"]
            elif node.kind in (Kind.ADD, Kind.CONCAT):
                if any(s[1:] != (h, w) for s in ins):
                    raise ShapeError(f"node {nid!r}: spatial sizes differ across inputs {ins}")
            shapes[nid] = (node.channels, h, w)
        return shapes

    # parameters ----------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for nid in self.topo_order:
            for name, t in self.nodes[nid].named_parameters():
                yield f"{nid}.{name}", t

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        for nid in self.topo_order:
            for name, arr in self.nodes[nid].named_arrays():
                yield f"{nid}.{name}", arr

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def clamp_thresholds(self) -> None:
        for node in self.bn_nodes(masked_only=True):
            node.bn.clamp_threshold()

    def masks(self) -> dict[str, np.ndarray]:
        return {n.id: compute_mask(n.bn)[0] for n in self.bn_nodes(masked_only=True)}

    def mask_tensors(self) -> list[Tensor]:
        """Differentiable masks of every masked BN layer, in graph order."""
        return [mask_tensor(n.bn) for n in self.bn_nodes(masked_only=True)]

    def active_fraction(self) -> float:
        masks = list(self.masks().values())
        if not masks:
            return 1.0
        return float(sum(m.sum() for m in masks) / sum(m.size for m in masks))

    # execution -----------------------------------------------------------

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"graph expects [N, {self.in_channels}, H, W] input, got {x.shape}")
        values: dict[str, Tensor] = {}
        for nid in self.topo_order:
            node = self.nodes[nid]
            args = [values[s] for s in node.inputs]
            values[nid] = _run_node(node, args, x, training)
        return values[self.output_id]

    __call__ = forward

    # copying / serialisation --------------------------------------------

    def copy(self) -> NetworkGraph:
        return copy.deepcopy(self)

    def astype(self, dtype) -> NetworkGraph:
        g = self.copy()
        for node in g.nodes.values():
            for t in node.params.values():
                t.data = t.data.astype(dtype)
            if node.bn is not None:
                for t in (node.bn.gamma, node.bn.beta, node.bn.tau):
                    t.data = t.data.astype(dtype)
                node.bn.running_mean = node.bn.running_mean.astype(dtype)
                node.bn.running_var = node.bn.running_var.astype(dtype)
        return g

    def describe(self) -> list[dict]:
        return [self.nodes[nid].describe() for nid in self.topo_order]

    @classmethod
    def from_description(cls, desc: list[dict], arrays: dict[str, np.ndarray]) -> NetworkGraph:
        nodes = []
        for d in desc:
            kind = Kind(d["kind"])
            nid = d["id"]
            params = {}
            for pname in ("weight", "bias"):
                key = f"{nid}.{pname}"
                if key in arrays:
                    params[pname] = Tensor(arrays[key].copy(), requires_grad=True)
            bn = None
            if kind is Kind.BN:
                meta = d["bn"]
                bn = MaskedBNState(
                    gamma=Tensor(arrays[f"{nid}.gamma"].copy(), requires_grad=True),
                    beta=Tensor(arrays[f"{nid}.beta"].copy(), requires_grad=True),
                    tau=Tensor(arrays[f"{nid}.tau"].copy(), requires_grad=meta["masked"]),
                    running_mean=arrays[f"{nid}.running_mean"].copy(),
                    running_var=arrays[f"{nid}.running_var"].copy(),
                    eps=meta["eps"],
                    momentum=meta["momentum"],
                    epsilon_band=meta["epsilon_band"],
                    masked=meta["masked"],
                )
            nodes.append(
                LayerNode(nid, kind, list(d["inputs"]), d["channels"], dict(d["attrs"]), params, bn, d.get("tag", ""))
            )
        return cls(nodes)


def _run_node(node: LayerNode, args: list[Tensor], x: Tensor, training: bool) -> Tensor:
    kind = node.kind
    if kind is Kind.INPUT:
        return x
    if kind is Kind.OUTPUT:
        return args[0]
    if kind is Kind.CONV:
        return F.conv2d(
            args[0], node.params["weight"], node.params.get("bias"), node.attrs["stride"], node.attrs["padding"]
        )
    if kind is Kind.POINTWISE:
        return F.pointwise_conv2d(args[0], node.params["weight"], node.params.get("bias"))
    if kind is Kind.DEPTHWISE:
        return F.depthwise_conv2d(
            args[0], node.params["weight"], node.params.get("bias"), node.attrs["stride"], node.attrs["padding"]
        )
    if kind is Kind.BN:
        return masked_bn_forward(args[0], node.bn, training)
    if kind is Kind.RELU:
        return F.relu(args[0])
    if kind is Kind.AVGPOOL:
        return F.avgpool2d(args[0], node.attrs["factor"])
    if kind is Kind.UPSAMPLE:
        return F.upsample_nearest2d(args[0], node.attrs["factor"])
    if kind is Kind.ADD:
        return F.add(*args)
    if kind is Kind.CONCAT:
        return F.concat_channels(*args)
    raise GraphError(f"unknown node kind {kind!r}")
