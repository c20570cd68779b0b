"""Shared fixtures: a small rendered dataset, a matcher trained on it,
and the filtered evaluation triplets derived from both."""

import numpy as np
import pytest

from facelens import game, netcore, synth, training
from facelens.synth import RenderConfig


SMALL_CONFIG = RenderConfig(
    train_identities=16,
    train_images=4,
    calibration_identities=20,
    calibration_images=3,
    eval_identities=4,
    seed=7,
)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("small_ds")
    return synth.generate_dataset(SMALL_CONFIG, out)


@pytest.fixture(scope="session")
def trained_net(small_dataset):
    return training.train_matcher(small_dataset,
                                  training.TrainConfig(epochs=10, seed=7))


@pytest.fixture(scope="session")
def calibrated_threshold(small_dataset, trained_net):
    scores = game.impostor_scores(trained_net, small_dataset)
    return game.calibrate_verification_threshold(scores, far=1e-2)


@pytest.fixture(scope="session")
def filtered_dataset(small_dataset, trained_net, calibrated_threshold):
    filtered, _ = game.filter_triplets(small_dataset, trained_net,
                                       calibrated_threshold)
    assert filtered.triplets, "fixture matcher keeps no triplets; fixture broken"
    return filtered


@pytest.fixture(scope="session")
def kept_triplet_context(filtered_dataset, trained_net):
    """(triplet, context) for the first kept triplet."""
    triplet = filtered_dataset.triplets[0]
    ctx = game.triplet_context(trained_net, filtered_dataset, triplet)
    return triplet, ctx


def random_image(rng, shape):
    return rng.random(shape).astype(np.float64)


def small_oracle_nets():
    """Small random float64 nets covering every layer kind, used by the
    finite-difference and dense-propagation oracles."""
    rng = np.random.default_rng(42)

    def conv(cout, cin):
        return netcore.Conv3x3(rng.normal(0, 0.5, (cout, cin, 3, 3)),
                               rng.normal(0, 0.1, cout))

    def fc(dout, din):
        return netcore.FullyConnected(rng.normal(0, 0.5, (dout, din)),
                                      rng.normal(0, 0.1, dout))

    nets = [
        netcore.NetworkGraph(
            [conv(4, 3), netcore.ReLU(), netcore.MaxPool2x2(),
             netcore.GlobalAvgPool(), fc(5, 4), netcore.L2Normalize()],
            input_shape=(3, 8, 8)),
        netcore.NetworkGraph(
            [conv(6, 2), netcore.ReLU(), conv(4, 6), netcore.ReLU(),
             netcore.GlobalAvgPool(), fc(3, 4), netcore.L2Normalize()],
            input_shape=(2, 6, 6)),
        netcore.NetworkGraph(
            [fc(8, 10), netcore.ReLU(), fc(4, 8), netcore.L2Normalize()],
            input_shape=(10,)),
        netcore.NetworkGraph(
            [conv(4, 1), netcore.ReLU(), netcore.MaxPool2x2(),
             conv(5, 4), netcore.ReLU(), netcore.GlobalAvgPool(),
             fc(4, 5), netcore.L2Normalize()],
            input_shape=(1, 8, 8)),
        netcore.NetworkGraph(
            [conv(3, 2), netcore.ReLU(), netcore.GlobalAvgPool(), fc(2, 3)],
            input_shape=(2, 6, 6)),
    ]
    return [net.astype(np.float64) for net in nets]
