import json

import numpy as np
import pytest
from _fixtures import randomize_masks, small_hourglass, soft_hard_gap

from dualprune import functional as F
from dualprune.complexity import count_macs, count_params, layer_params
from dualprune.nn import GraphBuilder, Kind, MaskedBNState
from dualprune.pruning import (
    Reason,
    build_dependency_graph,
    hard_prune,
    zero_channels,
)
from dualprune.tensor import Tensor, no_grad


def chain(masks=(1, 1, 1), seed=0):
    """input -> conv(1->3) -> BN -> ReLU -> conv(3->2) -> output, in float64."""
    b = GraphBuilder(1, seed=seed, dtype=np.float64)
    x = b.input()
    h = b.bn(b.conv(x, 3), gamma_init="ones")
    h = b.conv(b.relu(h), 2, bias=True)
    b.output(h)
    g = b.build()
    bn = g.bn_nodes()[0].bn
    bn.gamma.data[:] = np.where(np.array(masks) == 1, [0.8, 0.6, 1.1], [0.02, 0.05, 0.07])
    bn.beta.data[:] = [0.3, -0.4, 0.5]
    return g


def residual(branch_mask, identity_mask):
    """Two masked BNs meeting at an Add, followed by a conv."""
    b = GraphBuilder(1, seed=1, dtype=np.float64)
    x = b.input()
    a = b.bn(b.conv(x, 2))
    r = b.bn(b.conv(b.relu(a), 2))
    s = b.relu(b.add(a, r))
    b.output(b.conv(s, 1, bias=True))
    g = b.build()
    ida, br = g.bn_nodes()
    for node, m in ((ida, identity_mask), (br, branch_mask)):
        node.bn.gamma.data[:] = np.where(np.array(m) == 1, 0.9, 0.01)
        node.bn.beta.data[:] = 0.2
    return g


def test_chain_groups_are_singletons():
    g = chain()
    groups = build_dependency_graph(g)
    bn_id = g.bn_nodes()[0].id
    assert [grp.members for grp in groups] == [[(bn_id, 0)], [(bn_id, 1)], [(bn_id, 2)]]
    assert all(grp.reason is Reason.INDEPENDENT for grp in groups)


def test_residual_channels_share_a_group():
    g = residual([1, 1], [1, 1])
    groups = build_dependency_graph(g)
    a, r = (n.id for n in g.bn_nodes())
    assert len(groups) == 2
    for c, grp in enumerate(groups):
        assert sorted(grp.members) == sorted([(a, c), (r, c)])
        assert grp.reason is Reason.RESIDUAL_ADD


@pytest.mark.parametrize(
    "branch,identity,removed",
    [([0, 1], [1, 1], []), ([1, 1], [0, 1], []), ([0, 1], [0, 1], [0]), ([0, 0], [0, 1], [0])],
)
def test_residual_removal_needs_every_producer_masked(branch, identity, removed, rng):
    g = residual(branch, identity)
    gap, report = soft_hard_gap(g, rng)
    assert gap <= 1e-12
    assert report.layers[0].removed_indices == removed


def test_depthwise_tie():
    b = GraphBuilder(1, seed=0, dtype=np.float64)
    x = b.input()
    h = b.bn(b.conv(x, 3))
    dw = b.depthwise(h)
    b.output(b.pointwise(dw, 2))
    g = b.build()
    groups = build_dependency_graph(g)
    assert len(groups) == 3
    for c, grp in enumerate(groups):
        assert (dw, c) in grp.slots
        assert grp.reason is Reason.DEPTHWISE_TIE


def test_skip_concat_offsets():
    g = small_hourglass()
    groups = build_dependency_graph(g)
    by_slot = {s: grp for grp in groups for s in grp.slots}
    for node in g.nodes.values():
        if node.kind is Kind.CONCAT:
            off = 0
            for src in node.inputs:
                for c in range(g.nodes[src].channels):
                    if (src, c) in by_slot:
                        assert (node.id, off + c) in by_slot[(src, c)].slots
                off += g.nodes[src].channels
    assert any(grp.reason is Reason.SKIP_CONCAT for grp in groups)


def test_output_protected():
    b = GraphBuilder(1, dtype=np.float64)
    x = b.input()
    b.output(b.relu(b.bn(b.conv(x, 2))))
    g = b.build()
    for n in g.bn_nodes():
        n.bn.gamma.data[:] = 0.0
    groups = build_dependency_graph(g)
    assert all(grp.reason is Reason.OUTPUT_PROTECTED and grp.protected for grp in groups)
    pruned, report = hard_prune(g, groups)
    assert report.channels_after == 2 and report.layers[0].protected_indices == [0, 1]


@pytest.mark.parametrize("seed", range(5))
def test_groups_partition_masked_positions(seed):
    g = small_hourglass(seed=seed, separable=bool(seed % 2))
    groups = build_dependency_graph(g)
    members = [m for grp in groups for m in grp.members]
    expected = [(n.id, c) for n in g.bn_nodes(masked_only=True) for c in range(n.channels)]
    assert sorted(members) == sorted(expected)
    assert len(set(members)) == len(members)
    slots = [s for grp in groups for s in grp.slots]
    assert len(set(slots)) == len(slots)


def test_two_layer_worked_example(rng):
    g = chain((1, 0, 1))
    pruned, report = hard_prune(g, build_dependency_graph(g))
    convs = [pruned.nodes[n] for n in pruned.topo_order if pruned.nodes[n].kind is Kind.CONV]
    assert convs[0].params["weight"].shape == (2, 1, 3, 3)
    assert convs[1].params["weight"].shape == (2, 2, 3, 3)
    assert convs[1].attrs["in_channels"] == 2
    rec = report.layers[0]
    assert (rec.channels_before, rec.channels_after, rec.removed_indices) == (3, 2, [1])
    for _ in range(10):
        x = Tensor(rng.normal(size=(1, 1, 6, 6)))
        with no_grad():
            assert np.max(np.abs(g.forward(x).data - pruned.forward(x).data)) <= 1e-5


def test_all_kept_is_parameter_identical():
    g = small_hourglass(seed=3)
    for n in g.bn_nodes():
        n.bn.gamma.data[:] = np.abs(n.bn.gamma.data) + 0.2
    pruned, report = hard_prune(g, build_dependency_graph(g))
    assert report.groups_removed == 0 and report.removed_fraction == 0.0
    a, b = dict(g.named_arrays()), dict(pruned.named_arrays())
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert all(not n.bn.masked for n in pruned.bn_nodes())


def test_emptied_layer_keeps_largest_gamma(rng):
    g = chain((0, 0, 0))
    bn = g.bn_nodes()[0]
    bn.bn.gamma.data[:] = [0.02, -0.07, 0.05]
    pruned, report = hard_prune(g, build_dependency_graph(g))
    rec = report.layers[0]
    assert rec.channels_after == 1
    assert rec.retained_indices == [1] and rec.removed_indices == [0, 2]
    assert pruned.nodes[bn.id].channels == 1
    x = Tensor(rng.normal(size=(3, 1, 5, 5)))
    with no_grad():
        np.testing.assert_allclose(g.forward(x).data, pruned.forward(x).data, atol=1e-12)


def test_nonzero_depthwise_bias_blocks_removal(rng):
    # a masked channel that a biased depthwise conv turns non-zero must stay
    b = GraphBuilder(1, seed=0, dtype=np.float64)
    x = b.input()
    h = b.bn(b.conv(x, 2))
    dw = b.depthwise(h, bias=True)
    b.output(b.pointwise(dw, 1))
    g = b.build()
    g.nodes[dw].params["bias"].data[:] = [0.5, 0.0]
    g.bn_nodes()[0].bn.gamma.data[:] = 0.01
    zero = zero_channels(g)
    assert list(zero[dw]) == [False, True]
    gap, report = soft_hard_gap(g, rng, size=6)
    assert gap <= 1e-12
    assert report.layers[0].removed_indices == [1]


@pytest.mark.parametrize("separable", [True, False])
def test_mask_fuzzing_keeps_graph_consistent(separable):
    rng = np.random.default_rng(7 + separable)
    for _ in range(40):
        g = small_hourglass(seed=int(rng.integers(1 << 30)), separable=separable)
        randomize_masks(g, rng)
        gap, report = soft_hard_gap(g, rng)
        assert gap <= 1e-5
        assert all(r.channels_after >= 1 for r in report.layers)


def test_pruned_counts_follow_closed_form():
    rng = np.random.default_rng(11)
    for _ in range(10):
        g = small_hourglass(seed=int(rng.integers(1 << 30)))
        randomize_masks(g, rng)
        pruned, report = hard_prune(g, build_dependency_graph(g))
        before, after = count_params(g), count_params(pruned)
        for row in after.per_layer:
            node = pruned.nodes[row.layer_id]
            k = node.attrs.get("kernel", 1)
            if node.kind in (Kind.CONV, Kind.POINTWISE):
                cin = pruned.nodes[node.inputs[0]].channels
                closed = node.channels * cin * k * k + (node.channels if "bias" in node.params else 0)
            elif node.kind is Kind.DEPTHWISE:
                closed = node.channels * k * k
            elif node.kind is Kind.BN:
                closed = 2 * node.channels
            else:
                closed = 0
            assert row.params == closed == layer_params(node)
        # monotone accounting, equality iff nothing was removed
        macs_b, macs_a = count_macs(g, (8, 8)).macs, count_macs(pruned, (8, 8)).macs
        assert after.params <= before.params and macs_a <= macs_b
        assert (after.params == before.params) == (report.groups_removed == 0)


def test_prune_report_json():
    g = chain((1, 0, 1))
    _, report = hard_prune(g, build_dependency_graph(g))
    d = json.loads(report.to_json())
    layer = d["layers"][0]
    for key in ("channels_before", "channels_after", "removed_indices", "protected_indices"):
        assert key in layer
    assert d["groups_total"] == 3 and d["groups_removed"] == 1
    assert d["removed_fraction"] == pytest.approx(1 / 3)


def test_masked_bn_state_channels_follow_pruning():
    state = MaskedBNState.create(4, gamma=np.array([0.5, 0.01, 0.7, 0.02]), dtype=np.float64)
    b = GraphBuilder(1, dtype=np.float64)
    x = b.input()
    bn = b.bn(b.conv(x, 4))
    b.nodes[bn].bn = state
    b.output(b.conv(b.relu(bn), 1))
    g = b.build()
    pruned, _ = hard_prune(g, build_dependency_graph(g))
    node = pruned.nodes[bn]
    assert node.channels == 2
    np.testing.assert_array_equal(node.bn.gamma.data, [0.5, 0.7])
    assert node.bn.running_mean.shape == (2,)


def test_pruned_graph_trains_without_masks(rng):
    g = chain((1, 0, 1))
    pruned, _ = hard_prune(g, build_dependency_graph(g))
    out = pruned.forward(Tensor(rng.normal(size=(2, 1, 5, 5))), training=True)
    loss = F.mean(F.mul(out, out))
    loss.backward()
    assert all(t.grad is not None for _, t in pruned.named_parameters())
    assert not pruned.mask_tensors()
