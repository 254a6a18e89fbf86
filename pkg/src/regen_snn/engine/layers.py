"""
Network Layers - spiking conv, average-pool and fully connected layers.

Layers are evaluated same-step: a spike emitted by layer i at step t drives
layer i + 1 at step t. Conv layers are event-driven; each input spike
stamps its kernel footprint into the output current, so an empty frame
costs nothing.

Topology grammar:
    HxW[xC] - then '-' separated tokens
    <n>c<k>   conv layer, n maps, k x k kernel (valid)
    <s>a      average pooling, s x s window
    <n>o      output layer, n classes (last)
"""
import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError, ShapeUnderflowError, TopologyError
from .models import (
    KernelStack,
    LayerDescriptor,
    LifParams,
    LifPopulation,
    NetworkTopology,
    SpikeRaster,
)
from .rng import RngStream
from .spike_core import lif_step, poisson_encode, reset_population, synaptic_current
from .tensor_ops import avg_pool_maps

logger = logging.getLogger(__name__)

_INPUT_RE = re.compile(r"^(\d+)x(\d+)(?:x(\d+))?$")
_TOKEN_RE = re.compile(r"^(\d+)([cao])(\d*)$")


@dataclass
class OpCounter:
    """Counts synaptic events (one kernel tap applied for one spike)."""
    synaptic_events: int = 0
    per_layer: dict[int, int] = field(default_factory=dict)

    def add(self, layer: int, events: int):
        self.synaptic_events += events
        self.per_layer[layer] = self.per_layer.get(layer, 0) + events

    def reset(self):
        self.synaptic_events = 0
        self.per_layer.clear()


def parse_topology(spec: str) -> NetworkTopology:
    """
    Parse a compact topology string into layer descriptors.

    Geometries follow the valid-conv and pooling shape rules; kernel stacks
    are created unallocated (zero-sized) until initialize_weights runs.
    """
    if not isinstance(spec, str) or not spec.strip():
        raise TopologyError("topology string is empty")
    tokens = spec.strip().split("-")

    match = _INPUT_RE.match(tokens[0])
    if not match:
        raise TopologyError(f"bad input token '{tokens[0]}' in '{spec}' (expected HxW or HxWxC)")
    rows, cols = int(match.group(1)), int(match.group(2))
    maps = int(match.group(3)) if match.group(3) else 1
    if rows < 1 or cols < 1 or maps < 1:
        raise TopologyError(f"input geometry must be positive in '{spec}'")

    layers = [LayerDescriptor("input", maps, rows, cols)]
    stacks: dict[int, KernelStack] = {}

    if len(tokens) < 2:
        raise TopologyError(f"topology '{spec}' has no output layer")

    for position, token in enumerate(tokens[1:], start=1):
        match = _TOKEN_RE.match(token)
        if not match:
            raise TopologyError(f"bad layer token '{token}' in '{spec}'")
        number, kind, size = int(match.group(1)), match.group(2), match.group(3)
        last = position == len(tokens) - 1
        prev = layers[-1]

        if number < 1:
            raise TopologyError(f"token '{token}' must use a positive count")

        if kind == "c":
            if not size or int(size) < 1:
                raise TopologyError(f"conv token '{token}' needs a kernel size, e.g. 12c5")
            k = int(size)
            if k > prev.rows or k > prev.cols:
                raise ShapeUnderflowError(
                    f"kernel {k}x{k} of '{token}' exceeds {prev.rows}x{prev.cols} map"
                )
            layers.append(LayerDescriptor("conv", number, prev.rows - k + 1, prev.cols - k + 1, k))
            stacks[len(layers) - 1] = KernelStack(number, prev.maps, k, k)
        elif kind == "a":
            if size:
                raise TopologyError(f"pool token '{token}' takes only a window size, e.g. 2a")
            if prev.kind == "input":
                raise TopologyError(f"pooling '{token}' needs membrane potentials; it cannot follow the input")
            s = number
            if s > prev.rows or s > prev.cols:
                raise ShapeUnderflowError(f"window {s}x{s} of '{token}' exceeds {prev.rows}x{prev.cols} map")
            if prev.rows % s or prev.cols % s:
                raise TopologyError(f"window {s} does not divide {prev.rows}x{prev.cols} map")
            layers.append(LayerDescriptor("avgpool", prev.maps, prev.rows // s, prev.cols // s, s))
        else:
            if size:
                raise TopologyError(f"output token '{token}' takes only a class count, e.g. 10o")
            if not last:
                raise TopologyError(f"output token '{token}' must be the last layer")
            layers.append(LayerDescriptor("output", number, 1, 1))

    if layers[-1].kind != "output":
        raise TopologyError(f"topology '{spec}' must end with an output token")

    topology = NetworkTopology(spec=spec.strip(), layers=layers, stacks=stacks)
    logger.debug("Parsed topology %s: %s", spec, " -> ".join(l.describe() for l in layers))
    return topology


def initialize_weights(
    topology: NetworkTopology,
    rng: RngStream,
    init_gain: float = 1.0,
    readout_init: str = "uniform",
) -> NetworkTopology:
    """
    Allocate and draw all weights.

    Conv kernels are uniform in [-b, b] with b = init_gain / sqrt(in_maps * kh * kw).
    The readout uses b = init_gain / sqrt(features), either symmetric
    ("uniform") or on [0, b] ("positive").
    """
    for index in topology.conv_indices:
        stack = topology.stacks[index]
        bound = init_gain / np.sqrt(stack.fan_in)
        stack.weights = rng.derive("init", index).uniform(
            -bound, bound, (stack.out_maps, stack.in_maps, stack.kh, stack.kw)
        )

    return initialize_readout(topology, rng, init_gain, readout_init)


def initialize_readout(
    topology: NetworkTopology,
    rng: RngStream,
    init_gain: float = 1.0,
    readout_init: str = "uniform",
) -> NetworkTopology:
    """Draw fresh readout weights; conv stacks are left alone."""
    if readout_init not in ("uniform", "positive"):
        raise ValueError(f"unknown readout init '{readout_init}'")
    features = topology.feature_length
    bound = init_gain / np.sqrt(features)
    low = 0.0 if readout_init == "positive" else -bound
    topology.readout = rng.derive("init", "readout").uniform(low, bound, (topology.classes, features))
    return topology


def input_activity(rasters: Sequence[SpikeRaster]) -> tuple[float, int]:
    """
    Per-step spike probability of the inputs that fire at least once.

    Activity is pooled over windows, each window counting only its own
    active inputs. Returns (probability, active input count summed over
    windows); (0.0, 0) for silent rasters.
    """
    spikes = 0
    active = 0
    exposure = 0
    for raster in rasters:
        counts = raster.counts()
        lit = int(np.count_nonzero(counts))
        spikes += int(counts.sum())
        active += lit
        exposure += lit * raster.steps
    if exposure == 0:
        return 0.0, 0
    return spikes / exposure, active


def calibrate_kernels(stack: KernelStack, rasters: Sequence[SpikeRaster], v_th: float, drive: float) -> float:
    """
    Shift a kernel stack so a fully active receptive field is driven to
    `drive * v_th`.

    With p the per-step probability of active inputs (see input_activity),
    the kernel mean becomes drive * v_th / (p * fan_in); the spread drawn by
    initialize_weights is kept. Silent rasters leave the kernels unchanged.

    Returns:
        The measured probability p.
    """
    if not stack.allocated:
        raise ShapeError("kernel stack must be initialized before calibration")
    if drive <= 0:
        raise ValueError(f"drive must be positive, got {drive}")
    probability, _ = input_activity(rasters)
    if probability == 0.0:
        return 0.0
    target = drive * v_th / (probability * stack.fan_in)
    stack.weights += target - stack.weights.mean()
    return probability


def conv_current(
    spikes_in: np.ndarray,
    stack: KernelStack,
    counter: Optional[OpCounter] = None,
    layer: int = 0,
) -> np.ndarray:
    """
    J_k = sum_l conv2d_valid(spikes_l, weights[k, l]), accumulated per input spike.

    A spike at (l, r, c) adds weights[:, l, r - i, c - j] to every output
    position (i, j) whose receptive field covers it.
    """
    spikes_in = np.asarray(spikes_in)
    if spikes_in.ndim != 3 or spikes_in.shape[0] != stack.in_maps:
        raise ShapeError(f"spike frame {spikes_in.shape} does not match {stack.in_maps} input maps")
    _, rows, cols = spikes_in.shape
    kh, kw = stack.kh, stack.kw
    if kh > rows or kw > cols:
        raise ShapeError(f"kernel {kh}x{kw} larger than frame {rows}x{cols}")
    out_rows, out_cols = rows - kh + 1, cols - kw + 1
    current = np.zeros((stack.out_maps, out_rows, out_cols), dtype=np.float64)

    events = np.argwhere(spikes_in)
    if events.size == 0:
        return current

    flipped = stack.weights[:, :, ::-1, ::-1]
    taps = 0
    for l, r, c in events:
        i0, i1 = max(0, r - kh + 1), min(out_rows - 1, r)
        j0, j1 = max(0, c - kw + 1), min(out_cols - 1, c)
        fa0 = kh - 1 - r + i0
        fb0 = kw - 1 - c + j0
        di, dj = i1 - i0 + 1, j1 - j0 + 1
        current[:, i0:i1 + 1, j0:j1 + 1] += flipped[:, l, fa0:fa0 + di, fb0:fb0 + dj]
        taps += di * dj
    if counter is not None:
        counter.add(layer, taps * stack.out_maps)
    return current


def decode_current(
    hidden_spikes: np.ndarray,
    stack: KernelStack,
    counter: Optional[OpCounter] = None,
    layer: int = 0,
) -> np.ndarray:
    """
    Pseudo-visible current D_l = sum_k conv2d_full(spikes_k, flip2d(weights[k, l])).

    A hidden spike at (k, r, c) adds weights[k, :] to the input-sized window
    starting at (r, c).
    """
    hidden_spikes = np.asarray(hidden_spikes)
    if hidden_spikes.ndim != 3 or hidden_spikes.shape[0] != stack.out_maps:
        raise ShapeError(f"hidden frame {hidden_spikes.shape} does not match {stack.out_maps} maps")
    _, rows, cols = hidden_spikes.shape
    current = np.zeros((stack.in_maps, rows + stack.kh - 1, cols + stack.kw - 1), dtype=np.float64)
    events = np.argwhere(hidden_spikes)
    for k, r, c in events:
        current[:, r:r + stack.kh, c:c + stack.kw] += stack.weights[k]
    if counter is not None and events.size:
        counter.add(layer, len(events) * stack.in_maps * stack.kh * stack.kw)
    return current


def conv_forward_step(
    spikes_in: np.ndarray,
    stack: KernelStack,
    pop: LifPopulation,
    counter: Optional[OpCounter] = None,
    layer: int = 0,
) -> np.ndarray:
    """Drive a conv layer population for one step; potentials stay in pop.v_mem."""
    current = conv_current(spikes_in, stack, counter, layer)
    if current.shape != pop.shape:
        raise ShapeError(f"conv output {current.shape} does not match population {pop.shape}")
    return lif_step(pop, current)


def pool_forward_step(conv_potentials: np.ndarray, window: int, threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """
    Average potentials over s x s windows and threshold the result.

    Pooling units are memoryless: p is recomputed from the conv potentials
    every step and carries no reset or refractory state.

    Returns:
        (spikes, pooled potentials)
    """
    pooled = avg_pool_maps(conv_potentials, window)
    return pooled >= threshold, pooled


def fc_forward_step(spikes_in: np.ndarray, weights: np.ndarray, pop: LifPopulation) -> np.ndarray:
    """J = weights . spikes, then one LIF step of the output population."""
    spikes_in = np.asarray(spikes_in).ravel()
    if weights.ndim != 2 or weights.shape[1] != spikes_in.shape[0]:
        raise ShapeError(f"weights {weights.shape} incompatible with {spikes_in.shape[0]} inputs")
    return lif_step(pop, synaptic_current(weights, spikes_in))


@dataclass
class WindowRecord:
    """Recorded activity of one presentation window."""
    rasters: dict[int, SpikeRaster] = field(default_factory=dict)
    potentials: dict[int, np.ndarray] = field(default_factory=dict)
    output_counts: Optional[np.ndarray] = None


def create_populations(topology: NetworkTopology, params: LifParams) -> dict[int, LifPopulation]:
    """One LIF population per conv layer and for the output layer."""
    pops = {}
    for index, layer in enumerate(topology.layers):
        if layer.kind == "conv":
            pops[index] = LifPopulation.create(layer.geometry, params)
        elif layer.kind == "output":
            pops[index] = LifPopulation.create((layer.maps,), params)
    return pops


def run_window(
    topology: NetworkTopology,
    raster_in: SpikeRaster,
    params: LifParams,
    record: Iterable[int] = (),
    stop_after: Optional[int] = None,
    counter: Optional[OpCounter] = None,
    record_potentials: bool = False,
) -> WindowRecord:
    """
    Propagate one input raster through the network, step by step.

    Args:
        topology: initialized network
        raster_in: input raster matching the input geometry
        params: LIF constants shared by all layers
        record: layer indices whose spikes (and optionally potentials) are kept
        stop_after: last layer index to evaluate (default: all layers)
        counter: optional synaptic-event counter
        record_potentials: also keep potential traces of recorded layers

    Returns:
        WindowRecord with the requested rasters and the output spike counts
        when the output layer was evaluated.
    """
    if raster_in.geometry != topology.input.geometry:
        raise ShapeError(f"raster geometry {raster_in.geometry} does not match input {topology.input.geometry}")

    last = len(topology.layers) - 1 if stop_after is None else stop_after
    if not 0 <= last < len(topology.layers):
        raise ShapeError(f"stop_after={stop_after} outside the topology")

    pops = create_populations(topology, params)
    for pop in pops.values():
        reset_population(pop)

    record = set(record)
    steps = raster_in.steps
    spike_buffers = {
        i: np.zeros((steps, *topology.layers[i].geometry), dtype=bool)
        for i in record if i <= last and topology.layers[i].kind != "output"
    }
    potential_buffers = {
        i: np.zeros((steps, *topology.layers[i].geometry), dtype=np.float64)
        for i in spike_buffers if record_potentials and topology.layers[i].kind != "input"
    }
    output_counts = None
    output_index = len(topology.layers) - 1
    output_steps = np.zeros((steps, topology.classes), dtype=bool) if output_index in record else None
    if last == output_index:
        output_counts = np.zeros(topology.classes, dtype=np.int64)

    for t in range(steps):
        frame = raster_in.frame(t)
        potentials = None
        if 0 in spike_buffers:
            spike_buffers[0][t] = frame
        for i in range(1, last + 1):
            layer = topology.layers[i]
            if layer.kind == "conv":
                frame = conv_forward_step(frame, topology.stacks[i], pops[i], counter, i)
                potentials = pops[i].v_mem
            elif layer.kind == "avgpool":
                frame, potentials = pool_forward_step(potentials, layer.size, params.v_th)
            else:
                frame = fc_forward_step(frame, topology.readout, pops[i])
                output_counts += frame
                if output_steps is not None:
                    output_steps[t] = frame
                continue
            if i in spike_buffers:
                spike_buffers[i][t] = frame
            if i in potential_buffers:
                potential_buffers[i][t] = potentials

    result = WindowRecord(output_counts=output_counts)
    for i, events in spike_buffers.items():
        result.rasters[i] = SpikeRaster(events, dt=raster_in.dt)
    if output_steps is not None:
        result.rasters[output_index] = SpikeRaster(output_steps.reshape(steps, topology.classes, 1, 1))
    result.potentials.update(potential_buffers)
    return result


@dataclass
class SpikingNetwork:
    """
    A topology together with the constants needed to present images.

    Each call to `run` allocates private populations, so a frozen network
    can be shared read-only between threads.
    """
    topology: NetworkTopology
    params: LifParams
    i_rate: float
    t_ms: float

    def encode(self, image: np.ndarray, rng: RngStream) -> SpikeRaster:
        return poisson_encode(image, self.i_rate, self.t_ms, rng, self.params.dt)

    def run(self, raster: SpikeRaster, **kwargs) -> WindowRecord:
        return run_window(self.topology, raster, self.params, **kwargs)

    def layer_input(self, raster: SpikeRaster, conv_index: int) -> SpikeRaster:
        """Spikes arriving at conv layer `conv_index` for this input raster."""
        source = conv_index - 1
        if source == 0:
            return raster
        record = self.run(raster, record=[source], stop_after=source)
        return record.rasters[source]

    def features(self, raster: SpikeRaster) -> np.ndarray:
        """Flattened spikes of the feature layer per step, shape (T, features)."""
        feature_index = len(self.topology.layers) - 2
        if feature_index == 0:
            events = raster.events
        else:
            record = self.run(raster, record=[feature_index], stop_after=feature_index)
            events = record.rasters[feature_index].events
        return events.reshape(events.shape[0], -1)
