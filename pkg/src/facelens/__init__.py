"""Explainable face matching: network attention algorithms over a small
built-in convolutional matcher, plus a region-swap evaluation game on a
procedurally generated identity dataset."""

__version__ = "0.1.0"

from facelens.netcore import (
    NetworkGraph,
    forward,
    backward,
    triplet_loss,
    triplet_loss_grad,
    load_weights,
    save_weights,
)

__all__ = [
    "NetworkGraph",
    "forward",
    "backward",
    "triplet_loss",
    "triplet_loss_grad",
    "load_weights",
    "save_weights",
]
