"""Excitation-backprop family with triplet priors: EBP, contrastive EBP,
truncated contrastive EBP and a layerwise diagnostic.

Attention is propagated as marginal winner probabilities: at every linear
layer a parent's mass is split over its children proportionally to
(child activation x rectified weight). Biases are excluded from the
winner probabilities; children with a zero normalizer drop their mass
(the dropped total is reported on the output map)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from facelens import netcore
from facelens.netcore import (
    KIND_CONV, KIND_FC, KIND_GAP, KIND_L2NORM, KIND_MAXPOOL, KIND_RELU,
    MaxPool2x2, _col2im, _im2col,
)

MAP_SIZE = 64


class DegeneratePriorError(ValueError):
    """Raised when a triplet yields no positive prior mass."""


@dataclass
class SaliencyMap:
    """Per-pixel non-negative map over the probe image."""

    values: np.ndarray            # (64, 64) float32, >= 0
    normalization: str            # "raw-probability" | "max-normalized"
    raw_sum: float = 0.0
    dropped_mass: float = 0.0
    method: str = ""
    params: dict = field(default_factory=dict)

    def max_normalized(self):
        peak = float(self.values.max())
        vals = self.values / peak if peak > 0 else self.values.copy()
        return SaliencyMap(vals.astype(np.float32), "max-normalized",
                           self.raw_sum, self.dropped_mass, self.method, dict(self.params))


@dataclass
class EbpPrior:
    """Starting distribution over embedding coordinates."""

    weights: np.ndarray
    empty: bool = False


def ebp_prior_triplet(m, n):
    """Prior proportional to the rectified embedding difference
    max(0, m - n); flagged empty when m <= n everywhere."""
    m = np.asarray(m, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    if m.shape != n.shape:
        raise ValueError("embedding length mismatch")
    diff = np.maximum(m - n, 0.0)
    total = diff.sum()
    if total <= 0.0:
        return EbpPrior(np.zeros_like(diff), empty=True)
    return EbpPrior(diff / total, empty=False)


# ---------------------------------------------------------------------------
# Mass redistribution per layer kind


def _conv_transpose(r, weight):
    n, cout, h, w = r.shape
    w2 = weight.reshape(cout, -1).astype(r.dtype)
    gcols = np.matmul(w2.T, r.reshape(n, cout, h * w))
    cin = weight.shape[1]
    return _col2im(gcols, (n, cin, h, w))


def _redistribute(layer, x_in, aux, mass):
    """Mass at a layer's output -> mass at its input. Returns
    (child_mass, dropped)."""
    kind = layer.kind
    if kind == KIND_RELU:
        return mass, 0.0
    if kind == KIND_MAXPOOL:
        return MaxPool2x2.scatter(mass, aux, x_in.shape), 0.0
    if kind == KIND_GAP:
        z = x_in.sum(axis=(2, 3))
        pos = z > 0
        ratio = np.where(pos, mass / np.where(pos, z, 1.0), 0.0)
        dropped = float(mass[~pos].sum())
        return x_in * ratio[:, :, None, None], dropped
    if kind == KIND_CONV:
        wp = np.maximum(layer.weight, 0.0)
        n, _, h, w = x_in.shape
        cout = wp.shape[0]
        w2 = wp.reshape(cout, -1).astype(x_in.dtype)
        z = np.matmul(w2, _im2col(x_in)).reshape(n, cout, h, w)
        pos = z > 0
        ratio = np.where(pos, mass / np.where(pos, z, 1.0), 0.0)
        dropped = float(mass[~pos].sum())
        return x_in * _conv_transpose(ratio, wp), dropped
    if kind == KIND_FC:
        wp = np.maximum(layer.weight, 0.0).astype(x_in.dtype)
        z = x_in @ wp.T
        pos = z > 0
        ratio = np.where(pos, mass / np.where(pos, z, 1.0), 0.0)
        dropped = float(mass[~pos].sum())
        return x_in * (ratio @ wp), dropped
    raise ValueError(f"cannot propagate attention through layer kind {kind}")


def bilinear_resize(a, out_hw):
    """Edge-aligned bilinear resize of a 2-D array."""
    h, w = a.shape
    oh, ow = out_hw
    ys = np.linspace(0, h - 1, oh)
    xs = np.linspace(0, w - 1, ow)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = a[np.ix_(y0, x0)] * (1 - fx) + a[np.ix_(y0, x1)] * fx
    bot = a[np.ix_(y1, x0)] * (1 - fx) + a[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def _propagate(net, trace, start_layer, mass, stop_layer=0):
    """Propagate mass sitting at the output of start_layer down to the
    input of stop_layer. Returns (mass array, dropped total)."""
    dropped = 0.0
    for i in range(start_layer, stop_layer - 1, -1):
        mass, d = _redistribute(net.layers[i], trace.layer_input(i), trace.aux[i], mass)
        dropped += d
    return mass, dropped


def _mass_to_map(mass):
    m = mass[0]
    if m.ndim == 3:
        m = m.sum(axis=0)
    elif m.ndim == 1:
        m = m[None, :]
    if m.shape != (MAP_SIZE, MAP_SIZE):
        m = bilinear_resize(m, (MAP_SIZE, MAP_SIZE))
    return np.maximum(m, 0.0).astype(np.float32)


def _ebp_raw(net, trace, prior, stop_layer=0):
    start = net.embedding_layer_index()
    mass = prior.weights[None, :].astype(np.float64)
    mass, dropped = _propagate(net, trace, start, mass, stop_layer)
    raw_sum = float(mass.sum())
    return SaliencyMap(_mass_to_map(mass), "raw-probability",
                       raw_sum=raw_sum, dropped_mass=dropped, method="ebp",
                       params={"stop_layer": stop_layer})


def ebp(net, trace, prior, stop_layer=0):
    """Triplet-prior excitation backprop down to stop_layer (default:
    the input image). Returns a max-normalized map; the raw probability
    sum and dropped mass ride along as metadata."""
    if prior.empty:
        raise DegeneratePriorError("degenerate triplet prior")
    return _ebp_raw(net, trace, prior, stop_layer).max_normalized()


def contrastive_ebp(net, trace, m, n):
    """Rectified difference of the EBP maps for prior max(0, m-n) and
    the swapped prior max(0, n-m), taken at the image layer."""
    pa = ebp_prior_triplet(m, n)
    pb = ebp_prior_triplet(n, m)
    if pa.empty and pb.empty:
        raise DegeneratePriorError("degenerate triplet prior: m equals n")
    zero = SaliencyMap(np.zeros((MAP_SIZE, MAP_SIZE), np.float32), "raw-probability")
    a = _ebp_raw(net, trace, pa) if not pa.empty else zero
    b = _ebp_raw(net, trace, pb) if not pb.empty else zero
    vals = np.maximum(a.values - b.values, 0.0)
    out = SaliencyMap(vals, "raw-probability", raw_sum=float(vals.sum()),
                      dropped_mass=a.dropped_mass, method="cebp", params={})
    return out.max_normalized()


def truncated_contrastive_ebp(net, trace, m, n, k=50.0):
    """Contrastive EBP kept only where the plain EBP map reaches its
    k-th percentile (ties at the percentile kept)."""
    if not (0.0 < k <= 100.0):
        raise ValueError("percentile k must lie in (0, 100]")
    base = ebp(net, trace, ebp_prior_triplet(m, n))
    cut = np.percentile(base.values, k)
    con = contrastive_ebp(net, trace, m, n)
    vals = np.where(base.values >= cut, con.values, 0.0).astype(np.float32)
    out = SaliencyMap(vals, "raw-probability", raw_sum=float(vals.sum()),
                      dropped_mass=con.dropped_mass, method="tcebp", params={"k": k})
    return out.max_normalized()


def ebp_from_node(net, trace, layer_index, node_index, stop_layer=0):
    """EBP rooted at one post-activation node with unit mass."""
    mass = np.zeros(trace.activations[layer_index].shape, dtype=np.float64)
    mass[(0,) + tuple(node_index)] = 1.0
    mass, dropped = _propagate(net, trace, layer_index, mass, stop_layer)
    raw_sum = float(mass.sum())
    return SaliencyMap(_mass_to_map(mass), "raw-probability",
                       raw_sum=raw_sum, dropped_mass=dropped, method="node-ebp",
                       params={"layer": layer_index, "node": tuple(int(v) for v in node_index)})


def layerwise_ebp(net, trace, prior=None):
    """Diagnostic: for every relu layer, root an EBP pass at that
    layer's maximum-activation node and propagate to the image.
    All-zero layers yield a flagged empty map."""
    out = []
    for i, layer in enumerate(net.layers):
        if layer.kind != KIND_RELU:
            continue
        act = trace.activations[i][0]
        if act.max() <= 0.0:
            empty = SaliencyMap(np.zeros((MAP_SIZE, MAP_SIZE), np.float32),
                                "max-normalized", method="layerwise-ebp",
                                params={"layer": i, "empty": True})
            out.append((i, empty))
            continue
        node = np.unravel_index(int(act.argmax()), act.shape)
        smap = ebp_from_node(net, trace, i, node).max_normalized()
        smap.method = "layerwise-ebp"
        smap.params["empty"] = False
        out.append((i, smap))
    return out
