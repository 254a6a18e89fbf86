"""
Tests for target trains, the readout update and classification.
"""
import math
import os
import sys

import numpy as np
import pytest

# Add src to path for internal imports
src_path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src')
if src_path not in sys.path:
    sys.path.insert(0, src_path)

from regen_snn.engine.errors import EmptyDatasetError
from regen_snn.engine.layers import SpikingNetwork, initialize_weights, parse_topology
from regen_snn.engine.models import LifParams, LifPopulation
from regen_snn.engine.readout import (
    classify,
    decide,
    evaluate,
    make_target,
    readout_update,
    train_readout_step,
)
from regen_snn.engine.rng import RngStream


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

def test_target_only_drives_the_labeled_neuron():
    target = make_target(3, 30.0, 250.0, RngStream(0))
    assert target.events.shape == (250, 10)
    assert target.steps == 250
    others = np.delete(target.events, 3, axis=1)
    assert not others.any(), "non-target neurons must stay silent"


def test_target_rate_mean_count():
    root = RngStream(1)
    counts = np.array([make_target(5, 30.0, 250.0, root.derive("t", n)).events[:, 5].sum() for n in range(1000)])
    se = math.sqrt(250 * 0.03 * 0.97 / 1000)
    assert abs(counts.mean() - 7.5) < 3 * se, f"mean target count {counts.mean():.3f}"


def test_zero_target_rate_is_silent():
    assert not make_target(0, 0.0, 100.0, RngStream(2)).events.any()


def test_target_label_range():
    with pytest.raises(ValueError):
        make_target(10, 30.0, 250.0, RngStream(0))
    with pytest.raises(ValueError):
        make_target(-1, 30.0, 250.0, RngStream(0))


# ---------------------------------------------------------------------------
# Readout rule
# ---------------------------------------------------------------------------

def test_readout_update_example(params):
    update = readout_update(np.array([1.0]), np.array([0.4]), np.array([True]), params, eta=0.01)
    assert update.shape == (1, 1)
    assert update[0, 0] == pytest.approx(0.0032)


def test_readout_update_matches_loop(params):
    rng = np.random.default_rng(4)
    for _ in range(30):
        x = rng.random(12) < 0.3
        v = rng.normal(size=4)
        target = rng.random(4) < 0.5
        update = readout_update(x, v, target, params, eta=0.05)
        for j in range(4):
            desired = params.v_th if target[j] else params.v_res
            for i in range(12):
                assert update[j, i] == pytest.approx(0.05 * (desired - v[j]) * v[j] * x[i])


def test_silent_features_give_no_update(params):
    pop = LifPopulation.create((3,), params)
    step = train_readout_step(np.zeros(5), np.ones((3, 5)), pop, np.array([True, False, False]), eta=0.1)
    assert not step.update.any()
    assert not step.spikes.any()


def test_target_potentiates_active_synapse(params):
    pop = LifPopulation.create((2,), params)
    pop.v[:] = 0.4
    features = np.array([0, 1, 0])
    step = train_readout_step(features, np.zeros((2, 3)), pop, np.array([True, False]), eta=0.01)
    v = 0.4 + 0.05 * (-0.4)
    assert step.update[0, 1] == pytest.approx(0.01 * (1.2 - v) * v)
    assert step.update[1, 1] == pytest.approx(0.01 * (0.0 - v) * v)
    assert step.update[:, [0, 2]].sum() == 0.0


def test_spike_event_error_ignores_quiet_neurons(params):
    x = np.array([1.0, 1.0])
    v = np.array([0.4, 0.3, 1.5])
    target = np.array([True, False, False])
    update = readout_update(x, v, target, params, eta=0.01, events_only=True)
    assert update[0, 0] == pytest.approx(0.0032), "target spike keeps its error"
    assert not update[1].any(), "no target and no output spike"
    assert update[2, 0] == pytest.approx(0.01 * (0.0 - 1.5) * 1.5), "output spike without target is depressed"


# ---------------------------------------------------------------------------
# Decision
# ---------------------------------------------------------------------------

def test_decide_ties_go_to_lowest_index():
    assert decide(np.array([3, 7, 7, 0])).predicted == 1
    assert decide(np.zeros(10, dtype=int)).predicted == 0


def test_decide_is_scale_invariant():
    counts = np.array([2, 9, 4, 9, 1])
    assert decide(counts).predicted == decide(counts * 7).predicted == 1


@pytest.fixture(scope="module")
def halves_network():
    """
    Features are the raw pixels; class 0 listens to the left half and
    class 1 to the right half, with the opposite half inhibitory.
    """
    topology = parse_topology("4x4-2o")
    left = np.zeros((4, 4))
    left[:, :2] = 1.0
    topology.readout = np.stack([(2 * left - 1).ravel(), (1 - 2 * left).ravel()])
    return SpikingNetwork(topology, LifParams(), i_rate=1000.0, t_ms=20.0)


@pytest.fixture(scope="module")
def halves_data():
    images = np.zeros((6, 1, 4, 4), dtype=np.uint8)
    labels = np.array([0, 1, 0, 1, 0, 1])
    for n, label in enumerate(labels):
        if label == 0:
            images[n, 0, :, :2] = 255
        else:
            images[n, 0, :, 2:] = 255
    return images, labels


def test_classify_silent_image_defaults_to_class_zero(halves_network):
    decision = classify(halves_network, np.zeros((1, 4, 4), dtype=np.uint8), passes=2, rng=RngStream(0))
    assert decision.counts.sum() == 0
    assert decision.predicted == 0


def test_classify_is_deterministic():
    topology = initialize_weights(parse_topology("8x8-2c3-2a-10o"), RngStream(3), init_gain=4.0)
    network = SpikingNetwork(topology, LifParams(), i_rate=200.0, t_ms=30.0)
    image = np.random.default_rng(0).integers(0, 256, (1, 8, 8)).astype(np.uint8)
    a = classify(network, image, passes=2, rng=RngStream(9))
    b = classify(network, image, passes=2, rng=RngStream(9))
    np.testing.assert_array_equal(a.counts, b.counts)
    assert a.predicted == b.predicted


def test_evaluate_separable_set(halves_network, halves_data):
    images, labels = halves_data
    report = evaluate(halves_network, images, labels, iterations=3, passes=2, seed=1)
    assert report.iterations == 3
    assert report.accuracies == [1.0, 1.0, 1.0]
    assert report.confusion.sum() == 3 * len(labels)
    np.testing.assert_array_equal(report.confusion, [[9, 0], [0, 9]])


def test_evaluate_workers_match_sequential():
    topology = initialize_weights(parse_topology("8x8-2c3-2a-10o"), RngStream(3), init_gain=4.0)
    network = SpikingNetwork(topology, LifParams(), i_rate=200.0, t_ms=20.0)
    rng = np.random.default_rng(1)
    images = rng.integers(0, 256, (5, 1, 8, 8)).astype(np.uint8)
    labels = rng.integers(0, 10, 5)
    sequential = evaluate(network, images, labels, iterations=2, passes=1, seed=4)
    threaded = evaluate(network, images, labels, iterations=2, passes=1, seed=4, workers=3)
    np.testing.assert_array_equal(sequential.confusion, threaded.confusion)
    assert sequential.accuracies == threaded.accuracies


def test_evaluate_empty_set(halves_network):
    with pytest.raises(EmptyDatasetError):
        evaluate(halves_network, np.zeros((0, 1, 4, 4), dtype=np.uint8), np.zeros(0, dtype=int))
