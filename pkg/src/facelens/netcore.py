"""Minimal convolutional matcher engine.

Forward pass with retained activations, exact reverse-mode gradients to
every interior node and the input image, triplet loss, and a binary
weight format. Production arithmetic is float32; pass dtype=np.float64
for gradient-check reruns.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MAGIC = b"XFRW"
VERSION = 1

# layer kind tags used in the weight file
KIND_CONV = 1
KIND_RELU = 2
KIND_MAXPOOL = 3
KIND_GAP = 4
KIND_FC = 5
KIND_L2NORM = 6

INPUT_SHAPE = (3, 64, 64)
EMBED_DIM = 64


class WeightFormatError(ValueError):
    """Weight file has a bad magic, version or kind tag."""


class GraphValidationError(ValueError):
    """Layer shapes do not chain, or a weight blob is malformed."""


# ---------------------------------------------------------------------------
# im2col helpers for 3x3 same-padding convolution


def _im2col(x, k=3, pad=1):
    # x: (N, C, H, W) -> (N, C*k*k, H*W); slice copies beat the strided
    # sliding-window transpose by a wide margin on this access pattern
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k * k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i * k + j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * k * k, h * w)


def _col2im(cols, x_shape, k=3, pad=1):
    # inverse scatter-add of _im2col
    n, c, h, w = x_shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, c, k, k, h, w)
    for i in range(k):
        for j in range(k):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------------------
# Layers. All forward/backward methods are batched over leading axis N.


class Conv3x3:
    kind = KIND_CONV
    name = "conv3x3"

    def __init__(self, weight, bias):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 4 or weight.shape[2:] != (3, 3):
            raise GraphValidationError(f"conv weight must be (Cout, Cin, 3, 3), got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise GraphValidationError("conv bias length must equal Cout")
        self.weight = weight
        self.bias = bias

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, params):
        self.weight, self.bias = params

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise GraphValidationError(
                f"conv expects {self.weight.shape[1]} input channels, got shape {in_shape}")
        return (self.weight.shape[0],) + tuple(in_shape[1:])

    def forward(self, x):
        n, _, h, w = x.shape
        cout = self.weight.shape[0]
        cols = _im2col(x)
        w2 = self.weight.reshape(cout, -1).astype(x.dtype)
        y = np.matmul(w2, cols).reshape(n, cout, h, w)
        y += self.bias.astype(x.dtype)[None, :, None, None]
        return y, None

    def backward(self, gy, x, y, aux, want_param_grads=False):
        n, _, h, w = x.shape
        cout = self.weight.shape[0]
        w2 = self.weight.reshape(cout, -1).astype(x.dtype)
        gy2 = gy.reshape(n, cout, h * w)
        gcols = np.matmul(w2.T, gy2)
        gx = _col2im(gcols, x.shape)
        grads = None
        if want_param_grads:
            cols = _im2col(x)
            gw = np.tensordot(gy2, cols, axes=([0, 2], [0, 2])).reshape(self.weight.shape)
            gb = gy.sum(axis=(0, 2, 3))
            grads = [gw, gb]
        return gx, grads


class ReLU:
    kind = KIND_RELU
    name = "relu"

    def params(self):
        return []

    def set_params(self, params):
        pass

    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0), None

    def backward(self, gy, x, y, aux, want_param_grads=False):
        return gy * (x > 0), None


class MaxPool2x2:
    kind = KIND_MAXPOOL
    name = "maxpool2x2"

    def params(self):
        return []

    def set_params(self, params):
        pass

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise GraphValidationError(f"maxpool2x2 needs even spatial dims, got {in_shape}")
        return (c, h // 2, w // 2)

    def forward(self, x):
        a = x[:, :, 0::2, 0::2]
        b = x[:, :, 0::2, 1::2]
        c = x[:, :, 1::2, 0::2]
        d = x[:, :, 1::2, 1::2]
        y = np.maximum(np.maximum(a, b), np.maximum(c, d))
        # first-occurrence argmax in window order (0,0),(0,1),(1,0),(1,1)
        arg = np.where(a == y, 0, np.where(b == y, 1, np.where(c == y, 2, 3)))
        return y, arg.astype(np.int8)

    def forward_fast(self, x):
        a = x[:, :, 0::2, 0::2]
        b = x[:, :, 0::2, 1::2]
        c = x[:, :, 1::2, 0::2]
        d = x[:, :, 1::2, 1::2]
        return np.maximum(np.maximum(a, b), np.maximum(c, d)), None

    def backward(self, gy, x, y, aux, want_param_grads=False):
        n, c, h, w = x.shape
        g4 = np.zeros((n, c, h // 2, w // 2, 4), dtype=gy.dtype)
        np.put_along_axis(g4, aux[..., None], gy[..., None], axis=-1)
        gx = g4.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return gx, None

    @staticmethod
    def scatter(mass, aux, x_shape):
        """Route per-output values to the recorded argmax inputs (shared
        with the attention propagation)."""
        n, c, h, w = x_shape
        g4 = np.zeros((n, c, h // 2, w // 2, 4), dtype=mass.dtype)
        np.put_along_axis(g4, aux[..., None], mass[..., None], axis=-1)
        return g4.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


class GlobalAvgPool:
    kind = KIND_GAP
    name = "globalavgpool"

    def params(self):
        return []

    def set_params(self, params):
        pass

    def out_shape(self, in_shape):
        return (in_shape[0],)

    def forward(self, x):
        return x.mean(axis=(2, 3)), None

    def backward(self, gy, x, y, aux, want_param_grads=False):
        n, c, h, w = x.shape
        gx = np.broadcast_to(gy[:, :, None, None] / (h * w), x.shape).astype(gy.dtype).copy()
        return gx, None


class FullyConnected:
    kind = KIND_FC
    name = "fullyconnected"

    def __init__(self, weight, bias):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 2 or bias.shape != (weight.shape[0],):
            raise GraphValidationError("fc weight must be (Dout, Din) with matching bias")
        self.weight = weight
        self.bias = bias

    def params(self):
        return [self.weight, self.bias]

    def set_params(self, params):
        self.weight, self.bias = params

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.weight.shape[1]:
            raise GraphValidationError(
                f"fc expects flat input of {self.weight.shape[1]}, got shape {in_shape}")
        return (self.weight.shape[0],)

    def forward(self, x):
        w = self.weight.astype(x.dtype)
        return x @ w.T + self.bias.astype(x.dtype), None

    def backward(self, gy, x, y, aux, want_param_grads=False):
        w = self.weight.astype(x.dtype)
        gx = gy @ w
        grads = None
        if want_param_grads:
            grads = [gy.T @ x, gy.sum(axis=0)]
        return gx, grads


class L2Normalize:
    kind = KIND_L2NORM
    name = "l2normalize"
    eps = 1e-12

    def params(self):
        return []

    def set_params(self, params):
        pass

    def out_shape(self, in_shape):
        if len(in_shape) != 1:
            raise GraphValidationError("l2normalize expects a flat input")
        return tuple(in_shape)

    def forward(self, x):
        norm = np.sqrt((x * x).sum(axis=1, keepdims=True)) + self.eps
        return x / norm, norm

    def backward(self, gy, x, y, aux, want_param_grads=False):
        # full Jacobian: (I - y y^T) / ||x||
        dot = (gy * y).sum(axis=1, keepdims=True)
        return (gy - dot * y) / aux, None


_LAYER_BY_KIND = {
    KIND_CONV: Conv3x3,
    KIND_RELU: ReLU,
    KIND_MAXPOOL: MaxPool2x2,
    KIND_GAP: GlobalAvgPool,
    KIND_FC: FullyConnected,
    KIND_L2NORM: L2Normalize,
}


# ---------------------------------------------------------------------------
# Graph and traces


@dataclass
class NetworkGraph:
    """Immutable ordered layer list; validated so shapes chain from the
    input image to the unit-norm embedding."""

    layers: list
    input_shape: tuple = INPUT_SHAPE

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        self.layer_shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except GraphValidationError as e:
                raise GraphValidationError(f"layer {i} ({layer.name}): {e}") from e
            self.layer_shapes.append(shape)

    @property
    def embed_dim(self):
        return self.layer_shapes[-1][0]

    def embedding_layer_index(self):
        """Index of the layer producing the pre-normalization embedding."""
        if self.layers and self.layers[-1].kind == KIND_L2NORM:
            return len(self.layers) - 2
        return len(self.layers) - 1

    def astype(self, dtype):
        """Copy of the graph with weights cast to dtype (for 64-bit
        gradient-check mode)."""
        layers = []
        for layer in self.layers:
            params = [p.astype(dtype) for p in layer.params()]
            new = object.__new__(type(layer))
            new.__dict__.update(layer.__dict__)
            if params:
                new.set_params(params)
            layers.append(new)
        return NetworkGraph(layers, self.input_shape)


@dataclass
class ActivationTrace:
    """Post-activation tensors for one forward pass (batched, N first)."""

    image: np.ndarray                 # (N, C, H, W)
    activations: list                 # activations[i] = output of layer i
    aux: list                         # per-layer extras (maxpool argmax, l2 norms)
    embedding: np.ndarray             # (N, D), post-normalization
    pre_norm_embedding: np.ndarray    # (N, D)

    def layer_input(self, i):
        return self.image if i == 0 else self.activations[i - 1]


@dataclass
class GradientTrace:
    """Gradients of a scalar loss w.r.t. every post-activation tensor and
    the input image."""

    layer_grads: list                 # aligned with ActivationTrace.activations
    input_grad: np.ndarray
    param_grads: list = None          # per layer, when requested


def _forward_batched(net, images, check_range=True, fast=False):
    images = np.asarray(images)
    if images.shape[1:] != net.input_shape:
        raise GraphValidationError(
            f"input shape {images.shape[1:]} does not match network input {net.input_shape}")
    if check_range and (images.min() < 0.0 or images.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    x = images
    acts, auxes = [], []
    for layer in net.layers:
        fwd = layer.forward_fast if fast and hasattr(layer, "forward_fast") else layer.forward
        x, aux = fwd(x)
        acts.append(x)
        auxes.append(aux)
    emb = acts[-1]
    pre = acts[net.embedding_layer_index()]
    if not np.all(np.isfinite(emb)):
        raise FloatingPointError("non-finite embedding")
    return ActivationTrace(images, acts, auxes, emb, pre)


def forward(net, image):
    """Run one image through the net. Returns (embedding, trace); the
    trace keeps every post-activation tensor with a leading batch axis
    of 1."""
    image = np.asarray(image)
    trace = _forward_batched(net, image[None])
    return trace.embedding[0], trace


def embed_batch(net, images, batch_size=256):
    """Embeddings for a stack of images, without retaining traces."""
    images = np.asarray(images)
    out = np.empty((images.shape[0], net.embed_dim), dtype=images.dtype)
    for start in range(0, images.shape[0], batch_size):
        chunk = images[start:start + batch_size]
        out[start:start + chunk.shape[0]] = _forward_batched(net, chunk, fast=True).embedding
    return out


def backward(net, trace, loss_grad_at_embedding, want_param_grads=False):
    """Exact reverse-mode gradients of a scalar loss, given its gradient
    at the final (post-normalization) embedding."""
    if len(trace.activations) != len(net.layers):
        raise GraphValidationError("trace does not match network layer count")
    g = np.asarray(loss_grad_at_embedding, dtype=trace.embedding.dtype)
    if g.ndim == 1:
        g = np.broadcast_to(g, trace.embedding.shape).copy()
    if g.shape != trace.embedding.shape:
        raise GraphValidationError("loss gradient shape does not match embedding")
    layer_grads = [None] * len(net.layers)
    param_grads = [None] * len(net.layers) if want_param_grads else None
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        x = trace.layer_input(i)
        if trace.activations[i].shape[1:] != net.layer_shapes[i]:
            raise GraphValidationError(f"trace shape mismatch at layer {i}")
        layer_grads[i] = g
        g, pg = layer.backward(g, x, trace.activations[i], trace.aux[i],
                               want_param_grads=want_param_grads)
        if want_param_grads:
            param_grads[i] = pg
    return GradientTrace(layer_grads, g, param_grads)


def forward_from(net, trace, layer_index, activation):
    """Re-run the net from a modified post-activation of one layer.
    Used by finite-difference oracles for interior-node gradients."""
    x = np.asarray(activation)
    for i in range(layer_index + 1, len(net.layers)):
        x, _ = net.layers[i].forward(x)
    return x


# ---------------------------------------------------------------------------
# Triplet loss


def triplet_loss(p, m, n, alpha=0.2):
    """max(0, ||p-m||^2 - ||p-n||^2 + alpha)."""
    p, m, n = (np.asarray(v) for v in (p, m, n))
    if not (p.shape == m.shape == n.shape):
        raise ValueError("embedding length mismatch")
    if alpha < 0:
        raise ValueError("margin must be non-negative")
    d = ((p - m) ** 2).sum() - ((p - n) ** 2).sum() + alpha
    return float(max(0.0, d))


def triplet_loss_grad(p, m, n, alpha=0.2):
    """Gradient of the triplet loss w.r.t. the probe embedding:
    2(n - m) when the hinge is active, zero otherwise (zero at the
    exact boundary)."""
    p, m, n = (np.asarray(v) for v in (p, m, n))
    if not (p.shape == m.shape == n.shape):
        raise ValueError("embedding length mismatch")
    if alpha < 0:
        raise ValueError("margin must be non-negative")
    d = ((p - m) ** 2).sum() - ((p - n) ** 2).sum() + alpha
    if d <= 0.0:
        return np.zeros_like(p)
    return 2.0 * (n - m)


# ---------------------------------------------------------------------------
# Weight file I/O
#
# Layout: magic "XFRW", u32 version=1, u32 layer count, then per layer:
# u8 kind tag, u32 ndim, ndim x u32 weight dims, f32 weight payload
# followed (conv/fc) by the f32 bias payload of length dims[0].
# Everything little-endian. Parameterless layers write ndim=0.


def save_weights(net, path):
    parts = [MAGIC, struct.pack("<II", VERSION, len(net.layers))]
    for layer in net.layers:
        params = layer.params()
        if params:
            shape = params[0].shape
            parts.append(struct.pack("<BI", layer.kind, len(shape)))
            parts.append(struct.pack(f"<{len(shape)}I", *shape))
            for p in params:
                parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
        else:
            parts.append(struct.pack("<BI", layer.kind, 0))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise GraphValidationError(f"truncated weight file while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def f32s(self, count, what):
        raw = self.take(4 * count, what)
        return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def load_weights(path, input_shape=INPUT_SHAPE):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    r.pos = 4
    version = r.u32("version")
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}")
    n_layers = r.u32("layer count")
    layers = []
    for i in range(n_layers):
        kind = r.take(1, f"layer {i} kind")[0]
        if kind not in _LAYER_BY_KIND:
            raise WeightFormatError(f"layer {i}: unknown kind tag {kind}")
        ndim = r.u32(f"layer {i} ndim")
        dims = [r.u32(f"layer {i} dims") for _ in range(ndim)]
        if kind == KIND_CONV:
            if len(dims) != 4:
                raise GraphValidationError(f"layer {i}: conv weight needs 4 dims, got {dims}")
            w = r.f32s(int(np.prod(dims)), f"layer {i} weights").reshape(dims)
            b = r.f32s(dims[0], f"layer {i} bias")
            layers.append(Conv3x3(w, b))
        elif kind == KIND_FC:
            if len(dims) != 2:
                raise GraphValidationError(f"layer {i}: fc weight needs 2 dims, got {dims}")
            w = r.f32s(int(np.prod(dims)), f"layer {i} weights").reshape(dims)
            b = r.f32s(dims[0], f"layer {i} bias")
            layers.append(FullyConnected(w, b))
        else:
            if ndim != 0:
                raise GraphValidationError(f"layer {i}: parameterless layer with dims {dims}")
            layers.append(_LAYER_BY_KIND[kind]())
    if r.pos != len(data):
        raise GraphValidationError("trailing bytes after last layer")
    return NetworkGraph(layers, input_shape)


# ---------------------------------------------------------------------------
# Reference architecture


# small nonzero bias init keeps the pre-normalization embedding away
# from the origin for degenerate (e.g. all-zero) inputs, so l2normalize
# always yields a unit vector
def _he_conv(rng, cout, cin):
    std = np.sqrt(2.0 / (cin * 9))
    w = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(np.float32)
    return Conv3x3(w, rng.normal(0.0, 0.01, size=cout).astype(np.float32))


def _he_fc(rng, dout, din):
    std = np.sqrt(2.0 / din)
    w = rng.normal(0.0, std, size=(dout, din)).astype(np.float32)
    return FullyConnected(w, rng.normal(0.0, 0.01, size=dout).astype(np.float32))


def reference_matcher(seed=0):
    """The built-in matcher: conv16-relu-pool / conv32-relu-pool /
    conv64-relu-pool / conv128-relu / gap / fc64 / l2norm on 3x64x64."""
    rng = np.random.default_rng(seed)
    layers = [
        _he_conv(rng, 16, 3), ReLU(), MaxPool2x2(),
        _he_conv(rng, 32, 16), ReLU(), MaxPool2x2(),
        _he_conv(rng, 64, 32), ReLU(), MaxPool2x2(),
        _he_conv(rng, 128, 64), ReLU(),
        GlobalAvgPool(),
        _he_fc(rng, EMBED_DIM, 128),
        L2Normalize(),
    ]
    return NetworkGraph(layers, INPUT_SHAPE)
