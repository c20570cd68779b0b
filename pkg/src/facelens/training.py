"""Trainer for the built-in matcher: mini-batch SGD with a temporary
softmax classification head over the training identities. The head acts
on the pre-normalization features and is discarded after training; the
final unit-norm layer is used only at inference. Backpropagating the
head loss through the unit-norm layer removes the radial component of
every gradient, which traps the trunk near its almost-constant initial
features; training on the unnormalized features avoids that."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from facelens import netcore
from facelens.netcore import reference_matcher


@dataclass
class TrainConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 32
    seed: int = 0


class DegenerateManifestError(ValueError):
    pass


def _load_training_set(man):
    records = man.split_images("train")
    by_subject = {}
    for rec in records:
        by_subject.setdefault(rec.subject, []).append(rec.id)
    if len(by_subject) < 2:
        raise DegenerateManifestError("need at least 2 training identities")
    for subject, ids in by_subject.items():
        if len(ids) < 2:
            raise DegenerateManifestError(f"subject {subject} has fewer than 2 images")
    subjects = sorted(by_subject)
    images, labels = [], []
    for label, subject in enumerate(subjects):
        for image_id in sorted(by_subject[subject]):
            images.append(man.load_image(image_id))
            labels.append(label)
    return np.stack(images), np.asarray(labels), subjects


def train_matcher(man, config=None):
    """Train the reference matcher on the manifest's train split.
    Deterministic given config.seed; returns the embedding network
    (classification head discarded)."""
    config = config or TrainConfig()
    images, labels, subjects = _load_training_set(man)
    n_classes = len(subjects)
    rng = np.random.default_rng(config.seed)

    net = reference_matcher(seed=config.seed)
    # train through the trunk only; the unit-norm layer stays inference-time
    trunk = netcore.NetworkGraph(net.layers[:-1], input_shape=net.input_shape)
    head_w = (rng.normal(0.0, 1.0 / np.sqrt(net.embed_dim),
                         size=(n_classes, net.embed_dim)).astype(np.float32))
    head_b = np.zeros(n_classes, dtype=np.float32)

    velocities = {}

    def sgd_step(key, param, grad):
        v = velocities.get(key)
        if v is None:
            v = np.zeros_like(param)
        v = config.momentum * v - config.lr * grad
        velocities[key] = v
        return param + v

    n = images.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = images[idx]
            y = labels[idx]
            trace = netcore._forward_batched(trunk, batch)
            feat = trace.embedding
            logits = feat @ head_w.T + head_b
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            probs = e / e.sum(axis=1, keepdims=True)
            g_logits = probs.copy()
            g_logits[np.arange(len(y)), y] -= 1.0
            g_logits /= len(y)

            gt = netcore.backward(trunk, trace, g_logits @ head_w,
                                  want_param_grads=True)

            g_head_w = g_logits.T @ feat
            g_head_b = g_logits.sum(axis=0)
            head_w = sgd_step("head_w", head_w, g_head_w.astype(np.float32))
            head_b = sgd_step("head_b", head_b, g_head_b.astype(np.float32))

            for li, layer in enumerate(trunk.layers):
                pg = gt.param_grads[li]
                if not pg:
                    continue
                params = layer.params()
                layer.set_params([
                    sgd_step((li, pi), params[pi], pg[pi].astype(np.float32))
                    for pi in range(len(params))
                ])
    return net


def identification_accuracy(net, gallery_images, gallery_labels, probe_images, probe_labels):
    """Top-1 nearest-mate accuracy: probes matched against per-identity
    mean embeddings of the gallery."""
    g = netcore.embed_batch(net, gallery_images)
    p = netcore.embed_batch(net, probe_images)
    labels = np.unique(gallery_labels)
    cents = np.stack([g[gallery_labels == lab].mean(axis=0) for lab in labels])
    cents /= np.linalg.norm(cents, axis=1, keepdims=True)
    d = ((p[:, None, :] - cents[None, :, :]) ** 2).sum(axis=2)
    pred = labels[d.argmin(axis=1)]
    return float((pred == np.asarray(probe_labels)).mean())
