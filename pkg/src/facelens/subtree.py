"""Subtree attention: rank post-relu nodes by the triplet-loss gradient,
root an excitation pass at each of the top-k nodes and blend the per-node
maps in a gradient-weighted convex combination."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from facelens import attribution, netcore
from facelens.attribution import SaliencyMap
from facelens.netcore import KIND_RELU


class InactiveHingeError(ValueError):
    pass


class ScoredNode(NamedTuple):
    layer: int
    index: tuple          # (channel, row, col) within the layer
    score: float          # rectified loss-gradient magnitude, > 0


def node_gradients(net, trace, m, n, alpha=0.2, orientation="descent"):
    """Score every post-relu scalar node with the rectified triplet-loss
    gradient. Default orientation rectifies the descent direction
    max(0, -dL/dx); orientation="ascent" rectifies +dL/dx instead.
    Returns all nodes with positive score."""
    if orientation not in ("descent", "ascent"):
        raise ValueError(f"unknown orientation {orientation!r}")
    p = trace.embedding[0]
    loss = netcore.triplet_loss(p, m, n, alpha)
    if loss <= 0.0:
        raise InactiveHingeError("triplet already satisfied; no explanation signal")
    g_embed = netcore.triplet_loss_grad(p, m, n, alpha)
    gt = netcore.backward(net, trace, g_embed)
    sign = -1.0 if orientation == "descent" else 1.0
    nodes = []
    for i, layer in enumerate(net.layers):
        if layer.kind != KIND_RELU:
            continue
        scores = np.maximum(sign * gt.layer_grads[i][0], 0.0)
        for idx in zip(*np.nonzero(scores)):
            nodes.append(ScoredNode(i, tuple(int(v) for v in idx), float(scores[idx])))
    return nodes


def top_k_nodes(scores, k):
    """Top k nodes by score descending; ties broken by (layer, index)
    ascending. Returns fewer when fewer positive scores exist."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not scores:
        raise ValueError("no scored nodes")
    ordered = sorted(scores, key=lambda s: (-s.score, s.layer, s.index))
    return ordered[:k]


def subtree_ebp(net, trace, m, n, alpha=0.2, k=27, orientation="descent"):
    """Weighted convex combination of per-node excitation maps for the
    top-k gradient nodes. Per-node maps are max-normalized before
    blending so the gradient weights, not map magnitudes, control
    influence."""
    nodes = top_k_nodes(node_gradients(net, trace, m, n, alpha, orientation), k)
    total_w = sum(node.score for node in nodes)
    acc = np.zeros((attribution.MAP_SIZE, attribution.MAP_SIZE), dtype=np.float64)
    dropped = 0.0
    for node in nodes:
        smap = attribution.ebp_from_node(net, trace, node.layer, node.index).max_normalized()
        acc += (node.score / total_w) * smap.values
        dropped += smap.dropped_mass
    out = SaliencyMap(acc.astype(np.float32), "raw-probability",
                      raw_sum=float(acc.sum()), dropped_mass=dropped,
                      method="subtree",
                      params={"k": k, "alpha": alpha, "orientation": orientation,
                              "selected": len(nodes), "weight_total": total_w})
    return out.max_normalized()
