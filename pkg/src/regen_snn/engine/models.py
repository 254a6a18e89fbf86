"""
Data models for the spiking engine.

Uses dataclasses for neuron state, spike rasters, kernel storage and the
parsed network topology. Arrays are numpy; geometry is always
(maps, rows, cols).
"""
import math
from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np

from .errors import ConfigError, ShapeError

Geometry = tuple[int, int, int]
LayerKind = Literal["input", "conv", "avgpool", "output"]
Granularity = Literal["per-step", "per-presentation"]
GateMode = Literal["signed", "rectified", "magnitude"]


@dataclass(frozen=True)
class LifParams:
    """Shared LIF constants. Times are in ms, potentials are unitless."""
    tau_rc: float = 20.0
    tau_ref: float = 1.0
    v_th: float = 1.2
    v_res: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        if not self.tau_rc > 0:
            raise ConfigError(f"tau_rc must be positive, got {self.tau_rc}")
        if self.tau_ref < 0:
            raise ConfigError(f"tau_ref must be non-negative, got {self.tau_ref}")
        if not self.v_th > self.v_res:
            raise ConfigError(f"v_th ({self.v_th}) must exceed v_res ({self.v_res})")
        if self.dt != 1.0:
            raise ConfigError(f"dt is fixed at 1.0 ms, got {self.dt}")

    @property
    def ref_steps(self) -> int:
        """Refractory steps armed after a spike: ceil(tau_ref / dt)."""
        return int(math.ceil(self.tau_ref / self.dt))

    @property
    def leak(self) -> float:
        """Forward-Euler factor dt / tau_rc."""
        return self.dt / self.tau_rc


@dataclass
class LifPopulation:
    """
    Membrane state for a grid of LIF neurons.

    `v` is the post-step potential (v_res for neurons that just fired).
    `v_mem` is the potential reached this step before any reset; learning
    rules and pooling read it.
    """
    shape: tuple[int, ...]
    params: LifParams
    v: np.ndarray
    ref_count: np.ndarray
    v_mem: np.ndarray

    @classmethod
    def create(cls, shape: tuple[int, ...], params: LifParams) -> 'LifPopulation':
        """Allocate a population resting at v_res."""
        shape = tuple(int(s) for s in shape)
        return cls(
            shape=shape,
            params=params,
            v=np.full(shape, params.v_res, dtype=np.float64),
            ref_count=np.zeros(shape, dtype=np.int64),
            v_mem=np.full(shape, params.v_res, dtype=np.float64),
        )

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class SpikeRaster:
    """
    Binary spike events for one presentation window.

    Events are stored time-major, `events[t]` is the frame at step t with
    shape (maps, rows, cols). `shape` reports (maps, rows, cols, steps).
    """
    events: np.ndarray
    dt: float = 1.0

    def __post_init__(self):
        if self.events.ndim != 4:
            raise ShapeError(f"raster events must be 4-D (T, maps, rows, cols), got {self.events.shape}")
        if self.events.dtype != np.bool_:
            self.events = self.events.astype(bool)

    @classmethod
    def empty(cls, geometry: Geometry, steps: int, dt: float = 1.0) -> 'SpikeRaster':
        return cls(np.zeros((steps, *geometry), dtype=bool), dt=dt)

    @property
    def steps(self) -> int:
        return int(self.events.shape[0])

    @property
    def geometry(self) -> Geometry:
        maps, rows, cols = self.events.shape[1:]
        return int(maps), int(rows), int(cols)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (*self.geometry, self.steps)

    def frame(self, t: int) -> np.ndarray:
        return self.events[t]

    def counts(self) -> np.ndarray:
        """Per-neuron spike counts over the window, shape (maps, rows, cols)."""
        return self.events.sum(axis=0, dtype=np.int64)

    def total(self) -> int:
        return int(self.events.sum())


@dataclass
class KernelStack:
    """
    Convolution weights of one layer, shape (out_maps, in_maps, kh, kw).

    The decoder never stores its own kernels: `decoder_kernel` returns a
    flipped view of the same storage.
    """
    out_maps: int
    in_maps: int
    kh: int
    kw: int
    weights: np.ndarray = field(default_factory=lambda: np.zeros((0, 0, 0, 0)))

    @property
    def allocated(self) -> bool:
        return self.weights.shape == (self.out_maps, self.in_maps, self.kh, self.kw)

    @property
    def fan_in(self) -> int:
        return self.in_maps * self.kh * self.kw

    def decoder_kernel(self, k: int, l: int) -> np.ndarray:
        return self.weights[k, l, ::-1, ::-1]

    def copy(self) -> 'KernelStack':
        return KernelStack(self.out_maps, self.in_maps, self.kh, self.kw, self.weights.copy())


@dataclass(frozen=True)
class LayerDescriptor:
    """One layer of a parsed topology."""
    kind: LayerKind
    maps: int
    rows: int
    cols: int
    size: Optional[int] = None  # kernel side for conv, window side for avgpool

    @property
    def geometry(self) -> Geometry:
        return self.maps, self.rows, self.cols

    @property
    def neurons(self) -> int:
        return self.maps * self.rows * self.cols

    def describe(self) -> str:
        if self.kind == "output":
            return f"output {self.maps}"
        label = f"{self.kind} {self.maps}@{self.rows}x{self.cols}"
        if self.size is not None:
            label += f" (k={self.size})"
        return label


@dataclass
class NetworkTopology:
    """
    Ordered layers plus their learnable parameters.

    `stacks` maps a layer index to the KernelStack of that conv layer.
    `readout` is the (classes x features) weight matrix of the output layer.
    """
    spec: str
    layers: list[LayerDescriptor]
    stacks: dict[int, KernelStack] = field(default_factory=dict)
    readout: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    @property
    def input(self) -> LayerDescriptor:
        return self.layers[0]

    @property
    def output(self) -> LayerDescriptor:
        return self.layers[-1]

    @property
    def classes(self) -> int:
        return self.output.maps

    @property
    def conv_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == "conv"]

    @property
    def feature_layer(self) -> LayerDescriptor:
        """Layer whose spikes feed the output layer."""
        return self.layers[-2]

    @property
    def feature_length(self) -> int:
        return self.feature_layer.neurons

    @property
    def initialized(self) -> bool:
        stacks_ok = all(s.allocated for s in self.stacks.values())
        return stacks_ok and self.readout.shape == (self.classes, self.feature_length)


@dataclass
class InstantError:
    """Pseudo-visible error e = V_des - V at one step."""
    e: np.ndarray
    desired: np.ndarray


@dataclass
class DeltaMaps:
    """Delta terms of the regenerative rule at one step."""
    dy: np.ndarray  # (in_maps, H, W)
    dh: np.ndarray  # (out_maps, H', W')


@dataclass(frozen=True)
class LearnConfig:
    """Learning settings for one regenerative layer."""
    eta: float = 0.001
    update_granularity: Granularity = "per-step"
    presentations_per_image: int = 3
    grad_clip: Optional[float] = None
    potential_gate: GateMode = "signed"

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}")
        if self.presentations_per_image < 1:
            raise ConfigError("presentations_per_image must be at least 1")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}")


@dataclass
class LabelTarget:
    """Desired output spikes for one label, events shape (T, classes)."""
    label: int
    events: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.events.shape[0])


@dataclass
class Decision:
    """Aggregated output spike counts and the predicted class."""
    counts: np.ndarray
    predicted: int
