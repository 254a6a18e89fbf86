"""
Regenerative Learning - layer-wise training of a spiking conv auto-encoder.

Per step t of a window:
    1. encode: h = LIF(sum_l conv2d_valid(x_l, w[k, l]))              (hidden)
    2. decode: y = LIF(sum_k conv2d_full(spikes(h_k), flip2d(w[k, l])))  (pseudo-visible)
    3. error:  e = V_des - y, V_des = v_th where x spiked else v_res
    4. deltas: dy = e * g(y);  dh_k = (sum_l conv2d_valid(dy_l, w[k, l])) * g(h_k)
    5. grad:   grad[k, l] = conv2d_valid(x_l, dh_k) + conv2d_valid(dy_l, spikes(h_k))
    6. update: w <- w + eta * grad

g(V) is the membrane potential used as the activation value (gate mode
"signed"), optionally rectified or taken by magnitude. Encoder and decoder
share one weight storage; both gradient terms land on it.

Sign: the update is applied as +eta * grad with e = V_des - V, so an input
spike whose pseudo-visible potential is below v_th strengthens the active
paths that reach it.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericError, ShapeError
from .layers import OpCounter, conv_forward_step, decode_current
from .models import (
    DeltaMaps,
    GateMode,
    InstantError,
    KernelStack,
    LearnConfig,
    LifParams,
    LifPopulation,
    SpikeRaster,
)
from .spike_core import lif_step, reset_population
from .tensor_ops import correlate_valid_maps, sum_correlate_valid

logger = logging.getLogger(__name__)


def gate(potentials: np.ndarray, mode: GateMode = "signed") -> np.ndarray:
    """Activation value used in place of a derivative in the delta rules."""
    if mode == "signed":
        return potentials
    if mode == "rectified":
        return np.maximum(potentials, 0.0)
    if mode == "magnitude":
        return np.abs(potentials)
    raise ValueError(f"unknown potential gate '{mode}'")


def desired_potential(input_spiked, params: LifParams):
    """v_th where the input neuron spiked this step, v_res otherwise."""
    spiked = np.asarray(input_spiked, dtype=bool)
    desired = np.where(spiked, params.v_th, params.v_res)
    return float(desired) if desired.ndim == 0 else desired


def instant_error(input_frame: np.ndarray, y_potentials: np.ndarray, params: LifParams) -> InstantError:
    """e[i] = desired_potential(spike_i) - y[i]."""
    input_frame = np.asarray(input_frame, dtype=bool)
    y_potentials = np.asarray(y_potentials, dtype=np.float64)
    if input_frame.shape != y_potentials.shape:
        raise ShapeError(f"input frame {input_frame.shape} vs pseudo-visible {y_potentials.shape}")
    desired = np.where(input_frame, params.v_th, params.v_res)
    return InstantError(e=desired - y_potentials, desired=desired)


def instant_loss(error: InstantError) -> float:
    """Mean squared potential error of one step, 1/(2n) * sum e^2."""
    return float(0.5 * np.mean(error.e ** 2))


def delta_output(error: InstantError, y_potentials: np.ndarray, mode: GateMode = "signed") -> np.ndarray:
    """dy[i] = e[i] * g(y[i])."""
    y_potentials = np.asarray(y_potentials, dtype=np.float64)
    if error.e.shape != y_potentials.shape:
        raise ShapeError(f"error {error.e.shape} vs potentials {y_potentials.shape}")
    return error.e * gate(y_potentials, mode)


def delta_hidden(
    dy: np.ndarray,
    stack: KernelStack,
    h_potentials: np.ndarray,
    mode: GateMode = "signed",
) -> np.ndarray:
    """
    Back-project dy through the tied decoder onto the hidden maps.

    The decoder is a full correlation with flipped kernels, so its adjoint
    is a valid correlation with the stored kernels:
        dh_k = (sum_l conv2d_valid(dy_l, w[k, l])) * g(h_k)
    """
    dy = np.asarray(dy, dtype=np.float64)
    h_potentials = np.asarray(h_potentials, dtype=np.float64)
    if dy.ndim != 3:
        raise ShapeError(f"dy must be 3-D (maps, rows, cols), got shape {dy.shape}")
    expected = (stack.out_maps, dy.shape[1] - stack.kh + 1, dy.shape[2] - stack.kw + 1)
    if dy.shape[0] != stack.in_maps or h_potentials.shape != expected:
        raise ShapeError(f"dy {dy.shape} / hidden {h_potentials.shape} do not fit stack {stack.weights.shape}")
    if not dy.any():
        return np.zeros(expected, dtype=np.float64)
    return sum_correlate_valid(dy, stack.weights) * gate(h_potentials, mode)


def conv_ae_gradient(
    x_frame: np.ndarray,
    dh: np.ndarray,
    h_spikes: np.ndarray,
    dy: np.ndarray,
) -> np.ndarray:
    """
    Kernel gradient of the tied encoder/decoder at one step.

    grad[k, l] = conv2d_valid(x_l, dh_k)        encoder synapses, V_i = input spike
               + conv2d_valid(dy_l, spikes_k)   decoder synapses, V_i = hidden spike

    Returns:
        (out_maps, in_maps, kh, kw)
    """
    x = np.asarray(x_frame, dtype=np.float64)
    dh = np.asarray(dh, dtype=np.float64)
    s = np.asarray(h_spikes, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    if x.ndim != 3 or dy.shape != x.shape or dh.ndim != 3 or s.shape != dh.shape:
        raise ShapeError(f"x {x.shape}, dy {dy.shape}, dh {dh.shape}, spikes {s.shape} are inconsistent")

    kh, kw = x.shape[1] - dh.shape[1] + 1, x.shape[2] - dh.shape[2] + 1
    if kh < 1 or kw < 1:
        raise ShapeError(f"hidden maps {dh.shape[1:]} larger than input {x.shape[1:]}")
    grad = np.zeros((dh.shape[0], x.shape[0], kh, kw), dtype=np.float64)
    if x.any() and dh.any():
        grad += correlate_valid_maps(x, dh)
    if s.any() and dy.any():
        grad += correlate_valid_maps(dy, s)
    return grad


def apply_update(stack: KernelStack, grads: np.ndarray, eta: float, clip: Optional[float] = None) -> KernelStack:
    """
    weights <- weights + eta * grads (in place).

    Raises NumericError on a non-finite gradient or when the step would
    overflow a weight; the weights are left untouched in both cases.
    """
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != stack.weights.shape:
        raise ShapeError(f"gradient {grads.shape} does not match weights {stack.weights.shape}")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite kernel gradient")
    if eta == 0:
        return stack
    if clip is not None:
        grads = np.clip(grads, -clip, clip)
    with np.errstate(over="ignore", invalid="ignore"):
        updated = stack.weights + eta * grads
    if not np.all(np.isfinite(updated)):
        raise NumericError(f"kernel update overflows (eta={eta})")
    stack.weights[...] = updated
    return stack


@dataclass
class StepResult:
    loss: float
    hidden_spikes: np.ndarray
    recon_spikes: np.ndarray


@dataclass
class WindowResult:
    """Outcome of one window presented to a regenerative layer."""
    loss_trace: np.ndarray
    input_counts: np.ndarray
    recon_counts: np.ndarray
    hidden_counts: np.ndarray
    updates: int = 0

    @property
    def mean_loss(self) -> float:
        return float(self.loss_trace.mean()) if self.loss_trace.size else 0.0

    @property
    def count_error(self) -> float:
        diff = self.input_counts.astype(np.float64) - self.recon_counts
        return float(np.sum(diff ** 2))


@dataclass
class RegenLayer:
    """
    Training context of one conv layer: its kernels, the hidden population
    and the pseudo-visible population with the input geometry.
    """
    stack: KernelStack
    params: LifParams
    input_shape: tuple[int, int, int]
    learn: LearnConfig = field(default_factory=LearnConfig)
    counter: Optional[OpCounter] = None
    layer_index: int = 0
    reset_hook: Optional[Callable[["RegenLayer"], None]] = None

    def __post_init__(self):
        maps, rows, cols = self.input_shape
        if maps != self.stack.in_maps:
            raise ShapeError(f"input has {maps} maps, stack expects {self.stack.in_maps}")
        hidden = (self.stack.out_maps, rows - self.stack.kh + 1, cols - self.stack.kw + 1)
        self.hidden = LifPopulation.create(hidden, self.params)
        self.visible = LifPopulation.create(self.input_shape, self.params)
        self._pending = np.zeros_like(self.stack.weights)

    def reset(self):
        reset_population(self.hidden)
        reset_population(self.visible)
        self._pending = np.zeros_like(self.stack.weights)

    def step(self, x_frame: np.ndarray, learn: bool = True) -> tuple[StepResult, bool]:
        """Encode, decode, score and (optionally) learn from one input frame."""
        hidden_spikes = conv_forward_step(x_frame, self.stack, self.hidden, self.counter, self.layer_index)
        h = self.hidden.v_mem
        recon_spikes = lif_step(self.visible, decode_current(hidden_spikes, self.stack, self.counter, self.layer_index))
        y = self.visible.v_mem

        error = instant_error(x_frame, y, self.params)
        result = StepResult(instant_loss(error), hidden_spikes, recon_spikes)
        if not learn:
            return result, False

        mode = self.learn.potential_gate
        dy = delta_output(error, y, mode)
        dh = delta_hidden(dy, self.stack, h, mode)
        grads = conv_ae_gradient(x_frame, dh, hidden_spikes, dy)
        if not np.all(np.isfinite(grads)):
            raise NumericError(f"non-finite gradient in layer {self.layer_index}")
        if not grads.any():
            return result, False
        if self.learn.update_granularity == "per-step":
            apply_update(self.stack, grads, self.learn.eta, self.learn.grad_clip)
            return result, True
        self._pending += grads
        return result, False

    def flush(self) -> bool:
        """Apply gradients accumulated over a presentation."""
        if not self._pending.any():
            return False
        apply_update(self.stack, self._pending, self.learn.eta, self.learn.grad_clip)
        self._pending = np.zeros_like(self.stack.weights)
        return True

    def present(self, raster: SpikeRaster, learn: bool = True) -> WindowResult:
        """Run a whole window starting from rest."""
        if raster.geometry != self.input_shape:
            raise ShapeError(f"raster {raster.geometry} does not match layer input {self.input_shape}")
        self.reset()
        if self.reset_hook is not None:
            self.reset_hook(self)
        steps = raster.steps
        losses = np.zeros(steps, dtype=np.float64)
        recon_counts = np.zeros(self.input_shape, dtype=np.int64)
        hidden_counts = np.zeros(self.hidden.shape, dtype=np.int64)
        updates = 0
        for t in range(steps):
            result, updated = self.step(raster.frame(t), learn)
            losses[t] = result.loss
            recon_counts += result.recon_spikes
            hidden_counts += result.hidden_spikes
            updates += int(updated)
        if learn and self.learn.update_granularity == "per-presentation":
            updates += int(self.flush())
        if not np.all(np.isfinite(losses)) or not np.all(np.isfinite(self.stack.weights)):
            raise NumericError(f"non-finite loss or weights in layer {self.layer_index}")
        return WindowResult(losses, raster.counts(), recon_counts, hidden_counts, updates)


def train_layer_on_window(layer: RegenLayer, raster: SpikeRaster, config: Optional[LearnConfig] = None) -> WindowResult:
    """
    Present one raster to a layer with learning on.

    Populations are reset first; the returned loss trace has one entry per
    step (the mean squared potential error of that step).
    """
    if config is not None:
        layer.learn = config
    return layer.present(raster, learn=True)
