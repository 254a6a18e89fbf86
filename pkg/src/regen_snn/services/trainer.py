"""
Trainer - layer-wise regenerative training of the conv stack and the
supervised readout.

Protocol:
    1. Conv layers are trained one at a time, input side first. Every
       image is presented `presentations` times with a fresh Poisson raster;
       earlier layers are frozen and regenerate the input spikes of the
       layer under training.
    2. The readout is trained on the feature-layer spikes of a labeled
       subset with Poisson target trains for the labeled class.

Seeds fan out from the config's root seed:
    init       ("init", layer) and ("init", "readout")
    encode     ("encode", item_id, layer, presentation)
    calibrate  ("calibrate", item_id, layer)
    probe      ("probe", item_id, layer)
    readout    ("readout", item_id, epoch) and ("target", item_id, epoch)
"""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional, Union

import numpy as np
from tqdm import tqdm

from ..config.train_config import TrainConfig
from ..data.datasets import Dataset, head
from ..engine.errors import EmptyDatasetError, NumericError, ShapeError, TrainingAborted
from ..engine.layers import (
    SpikingNetwork,
    calibrate_kernels,
    initialize_readout,
    initialize_weights,
    parse_topology,
)
from ..engine.models import LifPopulation, NetworkTopology, SpikeRaster
from ..engine.readout import make_target, train_readout_step
from ..engine.regen import RegenLayer
from ..engine.rng import RngStream
from ..engine.spike_core import reset_population
from .checkpoint import Checkpoint, save_checkpoint
from .metrics import MetricsLog, measure_layer_reconstruction

logger = logging.getLogger(__name__)


def init_topology(config: TrainConfig) -> NetworkTopology:
    """Parse the topology and draw all initial weights from the root seed."""
    topology = parse_topology(config.topology)
    return initialize_weights(topology, RngStream(config.seed), config.init_gain, config.readout_init)


def build_network(config: TrainConfig, topology: NetworkTopology) -> SpikingNetwork:
    return SpikingNetwork(topology, config.to_lif_params(), config.i_rate, config.t_ms)


def calibrate_layer(config: TrainConfig, topology: NetworkTopology, index: int, rasters: list[SpikeRaster]) -> float:
    """Shift the kernels of conv layer `index` to the drive set by config.init_drive."""
    probability = calibrate_kernels(topology.stacks[index], rasters, config.lif.v_th, config.init_drive)
    if probability == 0.0:
        logger.warning("Layer %d: calibration inputs are silent, kernels keep their initial draw", index)
    else:
        logger.info(
            "Layer %d calibrated: input rate %.4f per step, kernel mean %.4f",
            index, probability, topology.stacks[index].weights.mean(),
        )
    return probability


def initial_topology(config: TrainConfig, images: Dataset) -> NetworkTopology:
    """
    The network training starts from: a fresh draw, then each conv layer
    calibrated on the spikes of the calibrated layers below it.
    """
    topology = init_topology(config)
    if config.kernel_init != "calibrated" or images.count == 0:
        return topology
    network = build_network(config, topology)
    root = RngStream(config.seed)
    sample = min(config.calibration_images, images.count)
    for index in topology.conv_indices:
        rasters = [
            network.layer_input(
                network.encode(images.images[i], root.derive("calibrate", int(images.ids[i]), index)), index
            )
            for i in range(sample)
        ]
        calibrate_layer(config, topology, index, rasters)
    return topology


class FeatureCache:
    """
    Spike rasters stored as packed bits, one .npy file per entry.

    Entries are keyed by the digest of the frozen weights that produced
    them, so a retrained stack never reads stale features.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.hits = 0
        self.misses = 0

    @staticmethod
    def frozen_digest(topology: NetworkTopology, upto: int, seed: int) -> str:
        """Digest of the conv weights of layers below index `upto` plus the seed."""
        h = hashlib.sha256(str(seed).encode("ascii"))
        for index in topology.conv_indices:
            if index < upto:
                h.update(np.ascontiguousarray(topology.stacks[index].weights, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def _path(self, digest: str, name: str) -> Path:
        return self.root / digest / f"{name}.npy"

    def get_or_compute(self, digest: str, name: str, compute: Callable[[], np.ndarray]) -> np.ndarray:
        path = self._path(digest, name)
        if path.exists():
            stored = np.load(path)
            self.hits += 1
            return _unpack(stored)
        events = compute()
        path.parent.mkdir(parents=True, exist_ok=True)
        np.save(path, _pack(events))
        self.misses += 1
        return events


def _pack(events: np.ndarray) -> np.ndarray:
    header = np.array([events.ndim, *events.shape], dtype=np.int64)
    return np.concatenate([header.view(np.uint8), np.packbits(events.astype(bool).ravel())])


def _unpack(stored: np.ndarray) -> np.ndarray:
    ndim = int(stored[:8].view(np.int64)[0])
    shape = tuple(int(s) for s in stored[8:8 * (ndim + 1)].view(np.int64))
    bits = np.unpackbits(stored[8 * (ndim + 1):], count=int(np.prod(shape)))
    return bits.astype(bool).reshape(shape)


@dataclass
class LayerReport:
    """Per-layer outcome of train_conv_stack."""
    layer: int
    pass_losses: list[float]
    pass_count_errors: list[float]
    images: int
    probe_before: Optional[float] = None
    probe_after: Optional[float] = None


@dataclass
class StackResult:
    topology: NetworkTopology
    metrics: MetricsLog
    layers_trained: int
    reports: list[LayerReport] = field(default_factory=list)


def _schedule(items: int, presentations: int, order: str) -> Iterator[tuple[int, int]]:
    """(item, presentation) pairs in training order."""
    if order == "repeat":
        for i in range(items):
            for p in range(presentations):
                yield i, p
    elif order == "interleaved":
        for p in range(presentations):
            for i in range(items):
                yield i, p
    else:
        raise ValueError(f"unknown presentation order '{order}'")


def train_conv_stack(
    config: TrainConfig,
    dataset: Dataset,
    topology: Optional[NetworkTopology] = None,
    metrics: Optional[MetricsLog] = None,
    start_layer: int = 0,
    probe: Optional[Dataset] = None,
    output_dir: Optional[Union[str, Path]] = None,
    on_layer_trained: Optional[Callable[[NetworkTopology, int], None]] = None,
    reset_hook: Optional[Callable[[RegenLayer], None]] = None,
) -> StackResult:
    """
    Train every conv layer with the regenerative rule, input side first.

    Args:
        config: run configuration
        dataset: unlabeled training images (capped at config.stack_images)
        topology: initialized network to continue from (default: fresh init)
        metrics: log to append to (default: new log)
        start_layer: number of conv layers already trained (resume cursor)
        probe: held-out images whose count reconstruction error is logged
            before and after each layer is trained
        output_dir: where an abort checkpoint and the feature cache go
        on_layer_trained: called with (topology, layers_trained) after each layer
        reset_hook: called on every presentation right after the reset

    Returns:
        StackResult with the trained topology and one report per layer trained.

    Raises:
        TrainingAborted: on a non-finite gradient, loss or weight; a
            checkpoint of the last finite state is written first when
            output_dir is set.
    """
    topology = topology if topology is not None else init_topology(config)
    if topology.spec != config.topology:
        raise ShapeError(f"topology '{topology.spec}' does not match config '{config.topology}'")
    metrics = metrics if metrics is not None else MetricsLog()
    conv_indices = topology.conv_indices
    result = StackResult(topology=topology, metrics=metrics, layers_trained=start_layer)
    if not conv_indices or start_layer >= len(conv_indices):
        logger.info("No conv layers left to train (%d of %d trained)", start_layer, len(conv_indices))
        return result
    if dataset.count == 0:
        raise EmptyDatasetError("conv stack training needs at least one image")
    if dataset.geometry != topology.input.geometry:
        raise ShapeError(f"dataset images {dataset.geometry} do not match input {topology.input.geometry}")

    images = head(dataset, config.stack_images) if config.stack_images else dataset
    params = config.to_lif_params()
    network = build_network(config, topology)
    root = RngStream(config.seed)
    cache = FeatureCache(Path(output_dir) / "feature_cache") if config.cache_features and output_dir else None

    for position in range(start_layer, len(conv_indices)):
        index = conv_indices[position]
        learn = config.to_learn_config(position)
        presentations = learn.presentations_per_image
        layer = RegenLayer(
            stack=topology.stacks[index],
            params=params,
            input_shape=topology.layers[index - 1].geometry,
            learn=learn,
            layer_index=index,
            reset_hook=reset_hook,
        )
        digest = FeatureCache.frozen_digest(topology, index, config.seed) if cache else ""

        def layer_input(item: int, purpose: str, *key: int) -> SpikeRaster:
            source = probe if purpose == "probe" else images
            item_id = int(source.ids[item])
            rng = root.derive(purpose, item_id, index, *key)

            def compute() -> np.ndarray:
                raster = network.encode(source.images[item], rng)
                return network.layer_input(raster, index).events

            if cache is None:
                return SpikeRaster(compute(), dt=params.dt)
            name = "_".join(str(k) for k in (purpose, item_id, index, *key))
            return SpikeRaster(cache.get_or_compute(digest, name, compute), dt=params.dt)

        if config.kernel_init == "calibrated":
            sample = min(config.calibration_images, images.count)
            calibrate_layer(config, topology, index, [layer_input(i, "calibrate") for i in range(sample)])

        report = LayerReport(
            layer=index,
            pass_losses=[0.0] * presentations,
            pass_count_errors=[0.0] * presentations,
            images=images.count,
        )
        if probe is not None:
            probe_rasters = [layer_input(i, "probe") for i in range(probe.count)]
            report.probe_before = measure_layer_reconstruction(layer, probe_rasters).aggregate
            metrics.record("count_error", report.probe_before, layer=index, extra="probe_before")

        logger.info(
            "Training conv layer %d (%s) on %d images x %d presentations, order=%s",
            index, topology.layers[index].describe(), images.count, presentations, config.presentation_order,
        )
        schedule = _schedule(images.count, presentations, config.presentation_order)
        bar = tqdm(
            schedule,
            total=images.count * presentations,
            desc=f"layer {index}",
            disable=not config.progress,
        )
        try:
            for item, p in bar:
                window = layer.present(layer_input(item, "encode", p), learn=True)
                report.pass_losses[p] += window.mean_loss
                report.pass_count_errors[p] += window.count_error
                if config.metric_every and item % config.metric_every == 0:
                    metrics.record("image_loss", window.mean_loss, layer=index, pass_index=p, index=int(images.ids[item]))
        except NumericError as exc:
            bar.close()
            path = None
            if output_dir is not None:
                path = save_checkpoint(
                    Checkpoint(topology, config.model_dump_json(), layers_trained=position),
                    Path(output_dir) / "abort.ckpt",
                )
            logger.error("Layer %d diverged: %s", index, exc)
            raise TrainingAborted(f"training aborted in layer {index}: {exc}", checkpoint_path=path) from exc

        for p in range(presentations):
            metrics.record("regen_loss", report.pass_losses[p], layer=index, pass_index=p, extra=f"images={images.count}")
            metrics.record("count_error", report.pass_count_errors[p], layer=index, pass_index=p, extra=f"images={images.count}")
            logger.info(
                "Layer %d pass %d: aggregate loss %.6f, count error %.1f",
                index, p + 1, report.pass_losses[p], report.pass_count_errors[p],
            )

        if probe is not None:
            report.probe_after = measure_layer_reconstruction(layer, probe_rasters).aggregate
            metrics.record("count_error", report.probe_after, layer=index, extra="probe_after")

        result.reports.append(report)
        result.layers_trained = position + 1
        if on_layer_trained is not None:
            on_layer_trained(topology, result.layers_trained)

    if cache is not None:
        logger.info("Feature cache: %d hits, %d misses", cache.hits, cache.misses)
    return result


@dataclass
class ReadoutResult:
    weights: np.ndarray
    metrics: MetricsLog
    epoch_losses: list[float]


def readout_features(
    network: SpikingNetwork,
    dataset: Dataset,
    item: int,
    rng: RngStream,
    cache: Optional[FeatureCache] = None,
    digest: str = "",
    name: str = "",
) -> np.ndarray:
    """(T, features) spike frames of the feature layer for one item."""
    def compute() -> np.ndarray:
        return network.features(network.encode(dataset.images[item], rng))

    if cache is None:
        return compute()
    return cache.get_or_compute(digest, name, compute)


def train_readout(
    config: TrainConfig,
    topology: NetworkTopology,
    labeled: Dataset,
    metrics: Optional[MetricsLog] = None,
    output_dir: Optional[Union[str, Path]] = None,
    reinitialize: bool = True,
) -> ReadoutResult:
    """
    Train the output layer on a labeled subset with the conv stack frozen.

    Each item is encoded afresh per epoch; its feature-layer spikes drive the
    output population step by step and the readout rule is applied at every
    step (or only on target and output spike events) against a Poisson target train for the item's label.
    """
    if labeled.count == 0:
        raise EmptyDatasetError("readout training needs at least one labeled item")
    if labeled.geometry != topology.input.geometry:
        raise ShapeError(f"dataset images {labeled.geometry} do not match input {topology.input.geometry}")
    metrics = metrics if metrics is not None else MetricsLog()
    root = RngStream(config.seed)
    if reinitialize:
        initialize_readout(topology, root, config.init_gain, config.readout_init)

    params = config.to_lif_params()
    network = build_network(config, topology)
    weights = topology.readout
    cache = FeatureCache(Path(output_dir) / "feature_cache") if config.cache_features and output_dir else None
    digest = FeatureCache.frozen_digest(topology, len(topology.layers), config.seed) if cache else ""
    pop = LifPopulation.create((topology.classes,), params)

    logger.info(
        "Training readout on %d labeled items x %d epoch(s), target %.1f Hz",
        labeled.count, config.readout_epochs, config.target_rate,
    )
    epoch_losses = []
    for epoch in range(config.readout_epochs):
        total_loss, total_steps = 0.0, 0
        bar = tqdm(range(labeled.count), desc=f"readout epoch {epoch + 1}", disable=not config.progress)
        for item in bar:
            item_id = int(labeled.ids[item])
            features = readout_features(
                network, labeled, item, root.derive("readout", item_id, epoch),
                cache, digest, f"readout_{item_id}_{epoch}",
            )
            target = make_target(
                int(labeled.labels[item]), config.target_rate, config.t_ms,
                root.derive("target", item_id, epoch), topology.classes, params.dt,
            )
            reset_population(pop)
            for t in range(target.steps):
                step = train_readout_step(
                    features[t], weights, pop, target.events[t], config.readout_eta, config.potential_gate,
                    events_only=config.readout_error == "spike-events",
                )
                weights += step.update
                total_loss += step.loss
                total_steps += 1
        if not np.all(np.isfinite(weights)):
            raise NumericError(f"non-finite readout weights after epoch {epoch + 1}")
        mean_loss = total_loss / max(total_steps, 1)
        epoch_losses.append(mean_loss)
        metrics.record("readout_loss", mean_loss, pass_index=epoch, index=labeled.count, extra=f"items={labeled.count}")
        logger.info("Readout epoch %d: mean loss %.6f", epoch + 1, mean_loss)

    topology.readout = weights
    return ReadoutResult(weights=weights, metrics=metrics, epoch_losses=epoch_losses)
