from dualprune.nn.graph import CHANNELWISE_KINDS, CONV_KINDS, GraphError, Kind, LayerNode, NetworkGraph
from dualprune.nn.layers import GraphBuilder, build_hourglass, make_depthwise_separable
from dualprune.nn.masked_bn import MaskedBNState, compute_mask, masked_bn_forward, ste_mask_grads

__all__ = [
    "CHANNELWISE_KINDS",
    "CONV_KINDS",
    "GraphBuilder",
    "GraphError",
    "Kind",
    "LayerNode",
    "MaskedBNState",
    "NetworkGraph",
    "build_hourglass",
    "compute_mask",
    "make_depthwise_separable",
    "masked_bn_forward",
    "ste_mask_grads",
]
