"""
Tests for layer-wise conv stack training and readout training.
"""
import os
import sys

import numpy as np
import pytest

# Add src to path for internal imports
src_path = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'src')
if src_path not in sys.path:
    sys.path.insert(0, src_path)

from regen_snn.config.train_config import TrainConfig
from regen_snn.data.datasets import Dataset
from regen_snn.engine.errors import EmptyDatasetError, NumericError, ShapeError, TrainingAborted
from regen_snn.engine.layers import parse_topology
from regen_snn.engine.regen import RegenLayer
from regen_snn.services.checkpoint import load_checkpoint, weights_digest
from regen_snn.services.trainer import (
    FeatureCache,
    _pack,
    _schedule,
    _unpack,
    build_network,
    init_topology,
    initial_topology,
    train_conv_stack,
    train_readout,
)
from regen_snn.engine.rng import RngStream
from tests.helpers import bar_images, ring_image

TOPOLOGY = "12x12-2c3-2a-2c3-10o"


def stack_config(**overrides) -> TrainConfig:
    values = dict(
        topology=TOPOLOGY, t_ms=10, presentations=2, i_rate=300, init_gain=3.0,
        eta=0.0005, grad_clip=5.0, seed=3, progress=False,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="module")
def bars():
    images, labels = bar_images(4, size=12, seed=5)
    return Dataset(images=images[:, np.newaxis], labels=labels)


def test_no_conv_layers_is_a_no_op(bars):
    result = train_conv_stack(stack_config(topology="12x12-10o"), bars)
    assert result.layers_trained == 0
    assert result.reports == []
    assert len(result.metrics) == 0


def test_layers_train_in_order_with_metrics(bars):
    result = train_conv_stack(stack_config(), bars)
    assert result.layers_trained == 2
    assert [r.layer for r in result.reports] == [1, 3]
    for report in result.reports:
        assert len(report.pass_losses) == 2
        assert report.images == 4
        assert all(np.isfinite(report.pass_losses))
    for layer in (1, 3):
        assert len(result.metrics.select("regen_loss", layer=layer)) == 2
        assert len(result.metrics.select("count_error", layer=layer)) == 2


def test_lower_layers_stay_frozen(bars):
    snapshots = {}

    def snapshot(topology, trained):
        snapshots[trained] = topology.stacks[1].weights.copy()

    result = train_conv_stack(stack_config(), bars, on_layer_trained=snapshot)
    assert sorted(snapshots) == [1, 2]
    np.testing.assert_array_equal(snapshots[1], snapshots[2])
    np.testing.assert_array_equal(result.topology.stacks[1].weights, snapshots[1])


def test_every_presentation_starts_at_rest(bars):
    config = stack_config()
    checks = []

    def hook(layer: RegenLayer):
        checks.append(bool(np.all(layer.hidden.v == config.lif.v_res) and np.all(layer.visible.v == config.lif.v_res)))

    train_conv_stack(config, bars, reset_hook=hook)
    assert len(checks) == 2 * bars.count * 2, "two layers x items x presentations"
    assert all(checks)


def test_training_is_deterministic(bars):
    first = train_conv_stack(stack_config(), bars)
    second = train_conv_stack(stack_config(), bars)
    assert weights_digest(first.topology) == weights_digest(second.topology)
    assert first.metrics.to_frame()["value"].tolist() == second.metrics.to_frame()["value"].tolist()

    other = train_conv_stack(stack_config(seed=4), bars)
    assert weights_digest(other.topology) != weights_digest(first.topology)


def test_interleaved_order(bars):
    assert list(_schedule(2, 2, "repeat")) == [(0, 0), (0, 1), (1, 0), (1, 1)]
    assert list(_schedule(2, 2, "interleaved")) == [(0, 0), (1, 0), (0, 1), (1, 1)]
    result = train_conv_stack(stack_config(presentation_order="interleaved"), bars)
    assert result.layers_trained == 2
    with pytest.raises(ValueError):
        list(_schedule(1, 1, "random"))


def test_probe_logs_before_and_after(bars):
    result = train_conv_stack(stack_config(), bars, probe=bars)
    for report in result.reports:
        assert report.probe_before is not None and report.probe_after is not None
    extras = result.metrics.select("count_error", layer=1)["extra"].tolist()
    assert extras[0] == "probe_before" and extras[-1] == "probe_after"


def test_feature_cache_gives_identical_training(bars, tmp_path):
    plain = train_conv_stack(stack_config(), bars)
    cached = train_conv_stack(stack_config(cache_features=True), bars, output_dir=tmp_path)
    assert weights_digest(plain.topology) == weights_digest(cached.topology)
    assert list((tmp_path / "feature_cache").rglob("*.npy"))


def test_packed_rasters_unpack_exactly():
    events = np.random.default_rng(0).random((7, 2, 5, 3)) < 0.3
    np.testing.assert_array_equal(_unpack(_pack(events)), events)


def test_frozen_digest_tracks_lower_weights():
    topology = init_topology(stack_config())
    before = FeatureCache.frozen_digest(topology, 3, seed=3)
    assert FeatureCache.frozen_digest(topology, 1, seed=3) != before
    topology.stacks[3].weights += 1.0
    assert FeatureCache.frozen_digest(topology, 3, seed=3) == before
    topology.stacks[1].weights += 1.0
    assert FeatureCache.frozen_digest(topology, 3, seed=3) != before


def test_numeric_failure_aborts_with_checkpoint(bars, tmp_path, monkeypatch):
    def explode(self, raster, learn=True):
        raise NumericError("non-finite gradient")

    monkeypatch.setattr(RegenLayer, "present", explode)
    with pytest.raises(TrainingAborted) as info:
        train_conv_stack(stack_config(), bars, output_dir=tmp_path)
    assert info.value.checkpoint_path == tmp_path / "abort.ckpt"
    saved = load_checkpoint(tmp_path / "abort.ckpt")
    assert saved.layers_trained == 0
    assert saved.topology.spec == TOPOLOGY


def digit_dataset() -> Dataset:
    return Dataset(images=ring_image()[np.newaxis, np.newaxis], labels=np.zeros(1, dtype=np.uint8))


def test_calibrated_start_fires_at_default_rates():
    config = TrainConfig(topology="28x28-4c5-2a-10o", seed=2, progress=False)
    topology = initial_topology(config, digit_dataset())
    assert topology.stacks[1].weights.mean() == pytest.approx(2.0 * 1.2 / (0.1 * 25), rel=0.05)

    network = build_network(config, topology)
    record = network.run(network.encode(ring_image()[np.newaxis], RngStream(4)), record=[1], stop_after=1)
    assert record.rasters[1].total() > 0

    uniform = config.model_copy(update={"kernel_init": "uniform"})
    assert weights_digest(initial_topology(uniform, digit_dataset())) == weights_digest(init_topology(uniform))


def test_first_layer_loss_falls_at_default_rates():
    """One digit, default v_th, I_rate, window and presentations; only the clip is set."""
    config = TrainConfig(topology="28x28-4c5-2a-10o", grad_clip=1.0, seed=2, progress=False)
    result = train_conv_stack(config, digit_dataset())
    losses = result.reports[0].pass_losses
    assert len(losses) == 3
    assert losses[2] < losses[0], f"pass losses {losses}"


def test_stack_input_errors(bars):
    with pytest.raises(ShapeError):
        train_conv_stack(stack_config(topology="8x8-2c3-10o"), bars)
    empty = Dataset(images=np.zeros((0, 1, 12, 12), dtype=np.uint8), labels=np.zeros(0, dtype=np.uint8))
    with pytest.raises(EmptyDatasetError):
        train_conv_stack(stack_config(), empty)


# ---------------------------------------------------------------------------
# Readout
# ---------------------------------------------------------------------------

def halves_dataset(count: int = 8) -> Dataset:
    images = np.zeros((count, 1, 4, 4), dtype=np.uint8)
    labels = np.arange(count, dtype=np.uint8) % 2
    for n, label in enumerate(labels):
        if label == 0:
            images[n, 0, :, :2] = 255
        else:
            images[n, 0, :, 2:] = 255
    return Dataset(images=images, labels=labels)


def readout_config(**overrides) -> TrainConfig:
    values = dict(
        topology="4x4-2o", i_rate=1000, t_ms=100, readout_eta=0.002, target_rate=500,
        potential_gate="rectified", readout_epochs=2, seed=2, progress=False,
    )
    values.update(overrides)
    return TrainConfig(**values)


def test_readout_favours_the_labeled_neuron():
    config = readout_config()
    topology = parse_topology(config.topology)
    topology.readout = np.full((2, 16), 0.1)
    result = train_readout(config, topology, halves_dataset(), reinitialize=False)

    left = np.zeros((4, 4), dtype=bool)
    left[:, :2] = True
    left = left.ravel()
    weights = result.weights
    assert weights[0, left].mean() > weights[1, left].mean()
    assert weights[1, ~left].mean() > weights[0, ~left].mean()
    assert len(result.epoch_losses) == 2
    assert len(result.metrics.select("readout_loss")) == 2


def test_spike_event_readout_leaves_unused_synapses():
    config = readout_config(readout_error="spike-events")
    topology = parse_topology(config.topology)
    topology.readout = np.full((2, 16), 0.1)
    weights = train_readout(config, topology, halves_dataset(), reinitialize=False).weights

    left = np.zeros((4, 4), dtype=bool)
    left[:, :2] = True
    left = left.ravel()
    assert weights[0, left].mean() > 0.1
    assert weights[1, ~left].mean() > 0.1
    np.testing.assert_array_equal(weights[1, left], 0.1)
    np.testing.assert_array_equal(weights[0, ~left], 0.1)


def test_readout_training_is_deterministic():
    config = readout_config(readout_init="positive")
    first = train_readout(config, parse_topology(config.topology), halves_dataset())
    second = train_readout(config, parse_topology(config.topology), halves_dataset())
    np.testing.assert_array_equal(first.weights, second.weights)
    assert first.epoch_losses == second.epoch_losses


def test_readout_needs_labeled_items():
    config = readout_config()
    empty = Dataset(images=np.zeros((0, 1, 4, 4), dtype=np.uint8), labels=np.zeros(0, dtype=np.uint8))
    with pytest.raises(EmptyDatasetError):
        train_readout(config, parse_topology(config.topology), empty)


def test_readout_on_trained_stack(bars):
    config = stack_config(readout_epochs=1)
    stack = train_conv_stack(config, bars)
    frozen = weights_digest(stack.topology)
    result = train_readout(config, stack.topology, bars)
    assert result.weights.shape == (10, 18)
    assert np.all(np.isfinite(result.weights))
    assert weights_digest(stack.topology) == frozen, "readout training must not touch conv kernels"
