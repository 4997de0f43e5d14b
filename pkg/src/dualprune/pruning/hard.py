"""Physical removal of masked channel groups."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from dualprune.nn.graph import CONV_KINDS, GraphError, Kind, NetworkGraph
from dualprune.nn.masked_bn import compute_mask
from dualprune.pruning.groups import PruneGroup, Slot, zero_channels
from dualprune.tensor import Tensor


class PruneError(RuntimeError):
    """Pruning could not be carried out (or produced an inconsistent graph)."""


@dataclass
class LayerPruneRecord:
    layer_id: str
    channels_before: int
    channels_after: int
    removed_indices: list[int] = field(default_factory=list)
    protected_indices: list[int] = field(default_factory=list)
    retained_indices: list[int] = field(default_factory=list)


@dataclass
class PruneReport:
    layers: list[LayerPruneRecord]
    groups_total: int
    groups_removed: int
    channels_before: int
    channels_after: int

    @property
    def removed_fraction(self) -> float:
        return 1.0 - self.channels_after / self.channels_before if self.channels_before else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["removed_fraction"] = self.removed_fraction
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def select_removable(graph: NetworkGraph, groups: list[PruneGroup]) -> tuple[list[bool], dict[str, list[int]]]:
    """Decide which groups are removed.

    A group goes only when every member is masked, it is not protected, and
    every slot of it that is read by a channel-mixing conv carries an exact
    zero. Afterwards any layer left without channels gets back the group
    holding its largest-``|gamma|`` member; those retentions are returned per
    BN layer.
    """
    masks = graph.masks()
    zero = zero_channels(graph)
    mixing_inputs = {s for n in graph.nodes.values() if n.kind in (Kind.CONV, Kind.POINTWISE) for s in n.inputs}
    remove = []
    for g in groups:
        ok = not g.protected and all(masks[nid][c] == 0 for nid, c in g.members)
        ok = ok and all(zero[nid][c] for nid, c in g.slots if nid in mixing_inputs)
        remove.append(ok)

    slot_group: dict[Slot, int] = {s: gi for gi, g in enumerate(groups) for s in g.slots}
    retained: dict[str, list[int]] = {}
    for nid in graph.topo_order:
        node = graph.nodes[nid]
        touching = sorted({slot_group[(nid, c)] for c in range(node.channels) if (nid, c) in slot_group})
        if not touching:
            continue
        if any((nid, c) not in slot_group or not remove[slot_group[(nid, c)]] for c in range(node.channels)):
            continue

        def strength(gi, nid=nid):
            # prefer this layer's own |gamma| when it is a member
            own = [abs(float(graph.nodes[m].bn.gamma.data[c])) for m, c in groups[gi].members if m == nid]
            every = [abs(float(graph.nodes[m].bn.gamma.data[c])) for m, c in groups[gi].members]
            return max(own) if own else max(every)

        best = max(touching, key=strength)
        remove[best] = False
        for m, c in groups[best].members:
            retained.setdefault(m, []).append(c)
    return remove, retained


def hard_prune(graph: NetworkGraph, groups: list[PruneGroup]) -> tuple[NetworkGraph, PruneReport]:
    """Return a compact copy of ``graph`` with removable groups deleted.

    Masks are folded into the surviving BatchNorm layers, which become plain
    (unmasked) layers; channels that had to stay despite a zero mask keep
    zero scale and shift, so the pruned network computes the same function
    as the soft-masked one.
    """
    remove, retained = select_removable(graph, groups)
    removed: dict[str, set[int]] = {}
    for g, gone in zip(groups, remove):
        if gone:
            for nid, c in g.slots:
                removed.setdefault(nid, set()).add(c)

    masks = graph.masks()
    keep = {
        nid: np.array([c for c in range(n.channels) if c not in removed.get(nid, ())], dtype=np.intp)
        for nid, n in graph.nodes.items()
    }

    records = []
    protected_by_layer: dict[str, list[int]] = {}
    for g, gone in zip(groups, remove):
        if gone:
            continue
        for nid, c in g.members:
            if masks[nid][c] == 0 and c not in retained.get(nid, []):
                protected_by_layer.setdefault(nid, []).append(c)
    for node in graph.bn_nodes(masked_only=True):
        records.append(
            LayerPruneRecord(
                node.id,
                node.channels,
                len(keep[node.id]),
                sorted(removed.get(node.id, ())),
                sorted(protected_by_layer.get(node.id, [])),
                sorted(retained.get(node.id, [])),
            )
        )

    pruned = graph.copy()
    for nid in pruned.topo_order:
        node = pruned.nodes[nid]
        k_out = keep[nid]
        k_in = keep[node.inputs[0]] if node.inputs else None
        if node.kind in CONV_KINDS:
            w = node.params["weight"].data
            w = w[k_out] if node.kind is Kind.DEPTHWISE else w[k_out][:, k_in]
            node.params["weight"] = Tensor(w, requires_grad=True)
            if "bias" in node.params:
                node.params["bias"] = Tensor(node.params["bias"].data[k_out], requires_grad=True)
            node.attrs["in_channels"] = len(k_in)
        elif node.kind is Kind.BN:
            bn = node.bn
            m = compute_mask(bn)[0]
            bn.gamma = Tensor((bn.gamma.data * m)[k_out], requires_grad=True)
            bn.beta = Tensor((bn.beta.data * m)[k_out], requires_grad=True)
            bn.running_mean = bn.running_mean[k_out].copy()
            bn.running_var = bn.running_var[k_out].copy()
            bn.tau = Tensor(bn.tau.data.copy(), requires_grad=False)
            bn.masked = False
        node.channels = len(k_out)
    try:
        pruned.validate()
    except GraphError as exc:
        raise PruneError(f"hard pruning produced an inconsistent graph: {exc}") from exc

    before = sum(r.channels_before for r in records)
    after = sum(r.channels_after for r in records)
    report = PruneReport(records, len(groups), sum(remove), before, after)
    return pruned, report
