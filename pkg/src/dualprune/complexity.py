"""Parameter and multiply-accumulate accounting.

Counts are purely structural (kinds, channel counts, kernel sizes, spatial
shapes), never weight values. Conventions:

* conv: ``Cout*Cin*K^2`` weights (+``Cout`` bias), ``H'*W'*Cout*Cin*K^2`` MACs
* depthwise: ``C*K^2`` weights (+``C``), ``H'*W'*C*K^2`` MACs
* BatchNorm: ``2C`` learned weights (scale, shift); threshold and running
  statistics are bookkeeping and not counted; ``H*W*C`` MACs
* add, pooling, upsampling, ReLU, concat: free
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from dualprune.nn.graph import Kind, LayerNode, NetworkGraph

SCHEMA_VERSION = 1
MAC_CONVENTION = (
    "1 MAC per multiply-accumulate; conv/depthwise count H'W'*Cout*Cin*K^2 / H'W'*C*K^2, "
    "BatchNorm counts one multiply per element, bias adds, additions, pooling and upsampling are free"
)


@dataclass
class LayerCost:
    layer_id: str
    kind: str
    module: str
    params: int
    macs: int


@dataclass
class ComplexityReport:
    per_layer: list[LayerCost]
    input_shape: list[int] | None = None
    per_module: dict[str, dict[str, int]] = field(default_factory=dict)
    totals: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.per_module:
            for row in self.per_layer:
                agg = self.per_module.setdefault(row.module, {"params": 0, "macs": 0})
                agg["params"] += row.params
                agg["macs"] += row.macs
        if not self.totals:
            macs = sum(r.macs for r in self.per_layer)
            self.totals = {"params": sum(r.params for r in self.per_layer), "macs": macs}
            if self.input_shape is not None:
                h, w = self.input_shape[-2:]
                self.totals["kmacs_per_pixel"] = macs / (h * w) / 1000

    @property
    def params(self) -> int:
        return self.totals["params"]

    @property
    def macs(self) -> int:
        return self.totals["macs"]

    @property
    def kmacs_per_pixel(self) -> float | None:
        return self.totals.get("kmacs_per_pixel")

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mac_convention": MAC_CONVENTION,
            "input_shape": self.input_shape,
            "per_layer": [asdict(r) for r in self.per_layer],
            "per_module": self.per_module,
            "totals": self.totals,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ComplexityReport:
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported complexity report schema_version {d.get('schema_version')}")
        return cls(
            [LayerCost(**r) for r in d["per_layer"]],
            d["input_shape"],
            {k: dict(v) for k, v in d["per_module"].items()},
            dict(d["totals"]),
        )


def layer_params(node: LayerNode) -> int:
    k = node.attrs.get("kernel", 1)
    bias = node.channels if node.attrs.get("bias") else 0
    if node.kind in (Kind.CONV, Kind.POINTWISE):
        return node.channels * node.attrs["in_channels"] * k * k + bias
    if node.kind is Kind.DEPTHWISE:
        return node.channels * k * k + bias
    if node.kind is Kind.BN:
        return 2 * node.channels
    return 0


def layer_macs(node: LayerNode, out_shape: tuple[int, int, int]) -> int:
    c, h, w = out_shape
    k = node.attrs.get("kernel", 1)
    if node.kind in (Kind.CONV, Kind.POINTWISE):
        return h * w * c * node.attrs["in_channels"] * k * k
    if node.kind is Kind.DEPTHWISE:
        return h * w * c * k * k
    if node.kind is Kind.BN:
        return h * w * c
    return 0


def count_params(graph: NetworkGraph) -> ComplexityReport:
    rows = [LayerCost(nid, n.kind.value, n.tag, layer_params(n), 0) for nid, n in _ordered(graph)]
    return ComplexityReport(rows)


def count_macs(graph: NetworkGraph, input_shape) -> ComplexityReport:
    """Full report for one input of shape ``(H, W)`` or ``(C, H, W)``."""
    h, w = input_shape[-2:]
    shapes = graph.infer_shapes(h, w)
    rows = [LayerCost(nid, n.kind.value, n.tag, layer_params(n), layer_macs(n, shapes[nid])) for nid, n in _ordered(graph)]
    return ComplexityReport(rows, [graph.in_channels, h, w])


def _ordered(graph: NetworkGraph):
    return [(nid, graph.nodes[nid]) for nid in graph.topo_order]


def ds_reduction_factor(n: int, d_k: int) -> float:
    """Cost of a depthwise-separable conv relative to a standard one: ``1/N + 1/D_K^2``."""
    if n < 1 or d_k < 1:
        raise ValueError(f"need N >= 1 and D_K >= 1, got N={n}, D_K={d_k}")
    return 1.0 / n + 1.0 / (d_k * d_k)


def emit_report(report: ComplexityReport, format: str = "json") -> str:  # noqa: A002
    if format == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if format == "markdown":
        return _markdown(report)
    raise ValueError(f"unknown report format {format!r}")


def _markdown(report: ComplexityReport) -> str:
    modules = list(dict.fromkeys(r.module for r in report.per_layer))
    rows = [r for m in modules for r in report.per_layer if r.module == m and (r.params or r.macs)]
    lines = [
        f"<!-- {MAC_CONVENTION} -->",
        "",
        "| module | layer | kind | params | MACs |",
        "|---|---|---|---:|---:|",
    ]
    lines += [f"| {r.module or '-'} | {r.layer_id} | {r.kind} | {r.params:,} | {r.macs:,} |" for r in rows]
    lines.append(f"| **total** | | | {report.params:,} | {report.macs:,} |")
    lines += ["", "| module | Params (M) | MACs |", "|---|---:|---:|"]
    for m in modules:
        agg = report.per_module[m]
        if agg["params"] or agg["macs"]:
            lines.append(f"| {m or '-'} | {agg['params'] / 1e6:.4f} | {agg['macs']:,} |")
    lines.append("")
    lines.append(f"Params (M): {report.params / 1e6:.4f}")
    if report.kmacs_per_pixel is not None:
        lines.append(f"KMACs/pixel: {report.kmacs_per_pixel:.4f}")
    return "\n".join(lines) + "\n"
