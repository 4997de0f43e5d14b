import json

import numpy as np
import pytest
from _fixtures import randomize_masks, small_hourglass
from _golden import GOLDEN, separable_graph, single, standard_graph

from dualprune.complexity import ComplexityReport, count_macs, count_params, ds_reduction_factor, emit_report
from dualprune.nn import GraphBuilder, build_hourglass
from dualprune.pruning import build_dependency_graph, hard_prune


@pytest.mark.parametrize("name,build,hw,params,macs", GOLDEN, ids=[g[0] for g in GOLDEN])
def test_golden_counts(name, build, hw, params, macs):
    g = build()
    assert count_params(g).params == params
    r = count_macs(g, hw)
    assert (r.params, r.macs) == (params, macs)


def test_kmacs_per_pixel_example():
    g, _ = single("conv", 8, cout=8, kernel=3)
    r = count_macs(g, (32, 32))
    assert r.macs == 589_824
    assert r.macs / (32 * 32) == 576
    assert r.kmacs_per_pixel == pytest.approx(0.576, abs=1e-15)


def test_empty_graph_costs_nothing():
    b = GraphBuilder(3)
    b.output(b.input())
    r = count_macs(b.build(), (16, 16))
    assert r.macs == 0 and r.params == 0 and r.kmacs_per_pixel == 0


def test_reduction_factor_formula():
    assert ds_reduction_factor(64, 3) == pytest.approx(1 / 64 + 1 / 9, abs=1e-15)
    assert round(ds_reduction_factor(64, 3), 5) == 0.12674
    assert ds_reduction_factor(1, 1) == 2.0
    with pytest.raises(ValueError):
        ds_reduction_factor(0, 3)


@pytest.mark.parametrize("n", [4, 8, 16, 32, 64])
@pytest.mark.parametrize("k", [3, 5])
def test_measured_ratio_equals_factor(n, k):
    sep = count_macs(separable_graph(n, n, k, False), (16, 16)).macs
    std = count_macs(standard_graph(n, n, k), (16, 16)).macs
    assert abs(sep / std - ds_reduction_factor(n, k)) <= 1e-12


def test_totals_and_per_module_sums():
    g = build_hourglass([8, 16, 32], 2, True, True)
    r = count_macs(g, (64, 64))
    assert r.params == sum(x.params for x in r.per_layer)
    assert r.macs == sum(x.macs for x in r.per_layer)
    assert r.kmacs_per_pixel == r.macs / (64 * 64) / 1000
    assert sum(m["params"] for m in r.per_module.values()) == r.params
    assert set(r.per_module) == {"down0", "down1", "down2", "bottleneck0", "bottleneck1", "up0", "up1", "up2", "head", ""}


def test_counting_is_structural():
    a = count_macs(small_hourglass(seed=0), (8, 8)).to_dict()
    b = count_macs(small_hourglass(seed=99), (8, 8)).to_dict()
    assert a == b


def test_markdown_two_layer_fixture():
    b = GraphBuilder(1)
    h = b.conv(b.input(), 4)
    b.output(b.conv(h, 1))
    text = emit_report(count_macs(b.build(), (8, 8)), "markdown")
    table = text.split("\n\n")[1].splitlines()
    body = [ln for ln in table if ln.startswith("|") and not ln.startswith("|---") and "layer" not in ln]
    assert len(body) == 3 and "**total**" in body[-1]


def test_markdown_groups_by_module_in_graph_order():
    g = build_hourglass([4, 8], 1, True, True)
    text = emit_report(count_macs(g, (16, 16)), "markdown")
    first = text.split("\n\n")[1]
    seen = []
    for line in first.splitlines()[2:-1]:
        mod = line.split("|")[1].strip()
        if not seen or seen[-1] != mod:
            seen.append(mod)
    assert seen == ["down0", "down1", "bottleneck0", "up1", "up0", "head"]


def test_json_round_trip_idempotent():
    r = count_macs(small_hourglass(), (8, 8))
    text = emit_report(r, "json")
    again = emit_report(ComplexityReport.from_dict(json.loads(text)), "json")
    assert text == again
    d = json.loads(text)
    assert d["schema_version"] == 1 and "mac_convention" in d


def test_unknown_format():
    with pytest.raises(ValueError):
        emit_report(count_params(small_hourglass()), "csv")


def test_pruning_strictly_lowers_totals():
    rng = np.random.default_rng(5)
    g = small_hourglass(seed=5)
    randomize_masks(g, rng)
    pruned, report = hard_prune(g, build_dependency_graph(g))
    assert report.groups_removed > 0
    before, after = count_macs(g, (8, 8)), count_macs(pruned, (8, 8))
    assert after.params < before.params and after.macs < before.macs
