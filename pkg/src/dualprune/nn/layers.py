"""Graph construction helpers: builder, depthwise-separable blocks, hourglass."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from dualprune.nn.graph import GraphError, Kind, LayerNode, NetworkGraph
from dualprune.nn.masked_bn import DEFAULT_EPSILON_BAND, DEFAULT_TAU, MaskedBNState
from dualprune.tensor import Tensor

GAMMA_UNIFORM_RANGE = (0.02, 1.0)


def _init_weight(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> Tensor:
    w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return Tensor(w, requires_grad=True, dtype=dtype)


def _conv_node(nid, kind, cin, cout, kernel, stride, padding, bias, rng, dtype) -> LayerNode:
    if kind is Kind.DEPTHWISE:
        wshape, fan_in = (cin, 1, kernel, kernel), kernel * kernel
    else:
        wshape, fan_in = (cout, cin, kernel, kernel), cin * kernel * kernel
    params = {"weight": _init_weight(rng, wshape, fan_in, dtype)}
    if bias:
        params["bias"] = Tensor(np.zeros(cout), requires_grad=True, dtype=dtype)
    attrs = {"in_channels": cin, "kernel": kernel, "stride": stride, "padding": padding, "bias": bias}
    return LayerNode(nid, kind, [], cout, attrs, params)


def make_depthwise_separable(
    cin: int,
    cout: int,
    kernel: int = 3,
    stride: int = 1,
    padding: int | None = None,
    *,
    bias: bool = False,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> list[LayerNode]:
    """Depthwise ``kernel x kernel`` over ``cin`` channels, then a 1x1 projection to ``cout``.

    Returns two unwired nodes with ids ``"dw"`` and ``"pw"``; the pointwise node
    already lists ``"dw"`` as its input. :meth:`GraphBuilder.block` renames and
    wires them.
    """
    if cin < 1 or cout < 1:
        raise GraphError(f"separable block needs positive channels, got {cin}->{cout}")
    if kernel < 1 or kernel % 2 == 0:
        raise GraphError(f"separable block needs an odd kernel, got {kernel}")
    rng = rng if rng is not None else np.random.default_rng(0)
    padding = kernel // 2 if padding is None else padding
    dw = _conv_node("dw", Kind.DEPTHWISE, cin, cin, kernel, stride, padding, bias, rng, dtype)
    pw = _conv_node("pw", Kind.POINTWISE, cin, cout, 1, 1, 0, bias, rng, dtype)
    pw.inputs = ["dw"]
    return [dw, pw]


class GraphBuilder:
    """Incremental construction of a :class:`NetworkGraph`.

    Every method takes the id of its producer(s) and returns the id of the
    new node.
    """

    def __init__(self, in_channels: int, *, seed: int = 0, dtype=np.float32):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.nodes: dict[str, LayerNode] = {}
        self._counter = 0
        self.tag = ""
        self._in_channels = in_channels

    def _add(self, node: LayerNode, prefix: str) -> str:
        self._counter += 1
        node.id = f"{prefix}{self._counter}"
        node.tag = node.tag or self.tag
        self.nodes[node.id] = node
        return node.id

    def channels(self, nid: str) -> int:
        return self.nodes[nid].channels

    def input(self) -> str:
        return self._add(LayerNode("", Kind.INPUT, [], self._in_channels), "input")

    def output(self, src: str) -> str:
        return self._add(LayerNode("", Kind.OUTPUT, [src], self.channels(src)), "output")

    def conv(self, src, cout, kernel=3, stride=1, padding=None, bias=False) -> str:
        padding = kernel // 2 if padding is None else padding
        node = _conv_node("", Kind.CONV, self.channels(src), cout, kernel, stride, padding, bias, self.rng, self.dtype)
        node.inputs = [src]
        return self._add(node, "conv")

    def pointwise(self, src, cout, bias=False) -> str:
        node = _conv_node("", Kind.POINTWISE, self.channels(src), cout, 1, 1, 0, bias, self.rng, self.dtype)
        node.inputs = [src]
        return self._add(node, "pw")

    def depthwise(self, src, kernel=3, stride=1, padding=None, bias=False) -> str:
        padding = kernel // 2 if padding is None else padding
        c = self.channels(src)
        node = _conv_node("", Kind.DEPTHWISE, c, c, kernel, stride, padding, bias, self.rng, self.dtype)
        node.inputs = [src]
        return self._add(node, "dw")

    def block(self, src: str, block: Sequence[LayerNode]) -> str:
        """Splice a chain of unwired nodes (e.g. a separable block) after ``src``."""
        renamed: dict[str, str] = {}
        last = src
        for node in block:
            old = node.id
            node.inputs = [renamed.get(i, i) for i in node.inputs] or [last]
            last = self._add(node, old)
            renamed[old] = last
        return last

    def separable(self, src, cout, kernel=3, stride=1, padding=None, bias=False) -> str:
        block = make_depthwise_separable(
            self.channels(src), cout, kernel, stride, padding, bias=bias, rng=self.rng, dtype=self.dtype
        )
        return self.block(src, block)

    def bn(self, src, *, masked=True, gamma_init="ones", tau=DEFAULT_TAU, epsilon_band=DEFAULT_EPSILON_BAND) -> str:
        c = self.channels(src)
        if gamma_init == "ones":
            gamma = np.ones(c)
        elif gamma_init == "uniform":
            gamma = self.rng.uniform(*GAMMA_UNIFORM_RANGE, size=c)
        else:
            raise ValueError(f"unknown gamma_init {gamma_init!r}")
        state = MaskedBNState.create(c, gamma, tau=tau, epsilon_band=epsilon_band, masked=masked, dtype=self.dtype)
        return self._add(LayerNode("", Kind.BN, [src], c, bn=state), "bn")

    def relu(self, src) -> str:
        return self._add(LayerNode("", Kind.RELU, [src], self.channels(src)), "relu")

    def avgpool(self, src, factor=2) -> str:
        return self._add(LayerNode("", Kind.AVGPOOL, [src], self.channels(src), {"factor": factor}), "pool")

    def upsample(self, src, factor=2) -> str:
        return self._add(LayerNode("", Kind.UPSAMPLE, [src], self.channels(src), {"factor": factor}), "up")

    def add(self, a, b) -> str:
        return self._add(LayerNode("", Kind.ADD, [a, b], self.channels(a)), "add")

    def concat(self, *srcs) -> str:
        c = sum(self.channels(s) for s in srcs)
        return self._add(LayerNode("", Kind.CONCAT, list(srcs), c), "cat")

    def build(self) -> NetworkGraph:
        return NetworkGraph(list(self.nodes.values()))


def build_hourglass(
    channels_per_level: Sequence[int],
    bottleneck_blocks: int,
    use_separable: bool,
    masked_bn: bool,
    *,
    in_channels: int = 1,
    out_channels: int = 1,
    kernel_size: int = 3,
    gamma_init: str | None = None,
    tau_init: float = DEFAULT_TAU,
    epsilon_band: float = DEFAULT_EPSILON_BAND,
    seed: int = 0,
    dtype=np.float32,
) -> NetworkGraph:
    """Encoder-decoder with skip concatenation and residual bottlenecks.

    Each level of the encoder is conv + BN + ReLU followed by 2x average
    pooling; the pre-pool activation is kept as a skip. Between encoder and
    decoder sit ``bottleneck_blocks`` residual blocks at the deepest width.
    The decoder mirrors the encoder with nearest upsampling and channel
    concatenation of the matching skip, and a biased 1x1 head maps back to
    ``out_channels``. Input height and width must be divisible by
    ``2 ** len(channels_per_level)``.

    ``gamma_init`` defaults to ``"uniform"`` when ``masked_bn`` is set (so that
    masks start near the threshold) and ``"ones"`` otherwise.
    """
    channels = list(channels_per_level)
    if len(channels) < 2:
        raise GraphError(f"hourglass needs at least 2 levels, got {channels}")
    if any(int(c) != c or c < 1 for c in channels):
        raise GraphError(f"hourglass channels must be positive integers, got {channels}")
    if bottleneck_blocks < 0:
        raise GraphError(f"bottleneck_blocks must be >= 0, got {bottleneck_blocks}")
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise GraphError(f"kernel_size must be odd, got {kernel_size}")
    if in_channels < 1 or out_channels < 1:
        raise GraphError("in_channels and out_channels must be positive")
    if tau_init < 0 or epsilon_band < 0:
        raise GraphError("tau_init and epsilon_band must be non-negative")
    if gamma_init is None:
        gamma_init = "uniform" if masked_bn else "ones"

    b = GraphBuilder(in_channels, seed=seed, dtype=dtype)

    def conv_bn(src, cout, relu=True):
        h = b.separable(src, cout, kernel_size) if use_separable else b.conv(src, cout, kernel_size)
        h = b.bn(h, masked=masked_bn, gamma_init=gamma_init, tau=tau_init, epsilon_band=epsilon_band)
        return b.relu(h) if relu else h

    h = b.input()
    skips = []
    for level, c in enumerate(channels):
        b.tag = f"down{level}"
        h = conv_bn(h, c)
        skips.append(h)
        h = b.avgpool(h)

    for i in range(bottleneck_blocks):
        b.tag = f"bottleneck{i}"
        r = conv_bn(h, channels[-1])
        r = conv_bn(r, channels[-1], relu=False)
        h = b.relu(b.add(h, r))

    for level in reversed(range(len(channels))):
        b.tag = f"up{level}"
        h = b.upsample(h)
        h = b.concat(h, skips[level])
        h = conv_bn(h, channels[max(level - 1, 0)])

    b.tag = "head"
    h = b.conv(h, out_channels, kernel=1, padding=0, bias=True)
    b.output(h)
    return b.build()
