"""Channel dependency analysis.

Every output channel of every node is a *slot*. Slots are merged whenever the
graph forces them to share a keep/remove decision: channel-wise ops (BN, ReLU,
pooling, upsampling, depthwise conv) tie output slot ``i`` to input slot
``i``, Add ties all of its operands position-wise, and Concat ties each of its
output slots to the corresponding slot of the operand it came from. A
:class:`PruneGroup` is one resulting equivalence class that contains at least
one masked BatchNorm channel.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from dualprune.nn.graph import CHANNELWISE_KINDS, Kind, NetworkGraph
from dualprune.nn.masked_bn import compute_mask

Slot = tuple[str, int]


class Reason(str, enum.Enum):
    INDEPENDENT = "Independent"
    DEPTHWISE_TIE = "DepthwiseTie"
    SKIP_CONCAT = "SkipConcat"
    RESIDUAL_ADD = "ResidualAdd"
    OUTPUT_PROTECTED = "OutputProtected"


# highest first; a group carries the strongest reason that applies
_PRIORITY = [Reason.OUTPUT_PROTECTED, Reason.RESIDUAL_ADD, Reason.SKIP_CONCAT, Reason.DEPTHWISE_TIE]
_KIND_REASON = {Kind.ADD: Reason.RESIDUAL_ADD, Kind.CONCAT: Reason.SKIP_CONCAT, Kind.DEPTHWISE: Reason.DEPTHWISE_TIE}


@dataclass
class PruneGroup:
    members: list[Slot]
    reason: Reason
    slots: list[Slot] = field(repr=False, default_factory=list)
    reasons: frozenset = frozenset()

    @property
    def protected(self) -> bool:
        return self.reason is Reason.OUTPUT_PROTECTED


class _UnionFind:
    def __init__(self):
        self.parent: dict[Slot, Slot] = {}

    def add(self, x: Slot) -> None:
        self.parent.setdefault(x, x)

    def find(self, x: Slot) -> Slot:
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a: Slot, b: Slot) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def build_dependency_graph(graph: NetworkGraph) -> list[PruneGroup]:
    """Partition all masked-BN channel positions into prune groups."""
    graph.validate()
    uf = _UnionFind()
    flags: dict[Slot, set[Reason]] = {}
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        for c in range(node.channels):
            uf.add((nid, c))
        if node.kind in CHANNELWISE_KINDS or node.kind is Kind.ADD:
            for src in node.inputs:
                for c in range(node.channels):
                    uf.union((src, c), (nid, c))
        elif node.kind is Kind.CONCAT:
            offset = 0
            for src in node.inputs:
                for c in range(graph.nodes[src].channels):
                    uf.union((src, c), (nid, offset + c))
                offset += graph.nodes[src].channels
        reason = _KIND_REASON.get(node.kind)
        if node.kind in (Kind.INPUT, Kind.OUTPUT):
            reason = Reason.OUTPUT_PROTECTED
        if reason is not None:
            for c in range(node.channels):
                flags.setdefault((nid, c), set()).add(reason)

    classes: dict[Slot, list[Slot]] = {}
    for nid in graph.topo_order:
        for c in range(graph.nodes[nid].channels):
            classes.setdefault(uf.find((nid, c)), []).append((nid, c))

    groups = []
    for slots in classes.values():
        members = [s for s in slots if graph.nodes[s[0]].kind is Kind.BN and graph.nodes[s[0]].bn.masked]
        if not members:
            continue
        found = set().union(*(flags.get(s, set()) for s in slots))
        reason = next((r for r in _PRIORITY if r in found), Reason.INDEPENDENT)
        groups.append(PruneGroup(members, reason, slots, frozenset(found)))
    groups.sort(key=lambda g: (graph.topo_order.index(g.members[0][0]), g.members[0][1]))
    return groups


def zero_channels(graph: NetworkGraph) -> dict[str, np.ndarray]:
    """For every node, which output channels are identically zero for any input.

    Determined structurally from the effective BN affine (scale and shift both
    zero after masking) propagated through ops that map zero to zero.
    """
    zero: dict[str, np.ndarray] = {}
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        ins = [zero[s] for s in node.inputs]
        if node.kind in (Kind.INPUT, Kind.CONV, Kind.POINTWISE):
            zero[nid] = np.zeros(node.channels, dtype=bool)
        elif node.kind is Kind.BN:
            m = compute_mask(node.bn)[0]
            zero[nid] = (node.bn.gamma.data * m == 0) & (node.bn.beta.data * m == 0)
        elif node.kind is Kind.DEPTHWISE:
            z = ins[0].copy()
            if "bias" in node.params:
                z &= node.params["bias"].data == 0
            zero[nid] = z
        elif node.kind is Kind.ADD:
            zero[nid] = np.logical_and.reduce(ins)
        elif node.kind is Kind.CONCAT:
            zero[nid] = np.concatenate(ins)
        else:
            zero[nid] = ins[0].copy()
    return zero
