"""
Spike Core - LIF neuron dynamics and Poisson rate coding.

Time is clocked at dt = 1 ms with forward Euler:
    v <- v + (dt / tau_rc) * (-v + J)
A neuron fires when the updated v reaches v_th (v >= v_th), is reset to
v_res and held there for ceil(tau_ref / dt) steps. Input current arriving
during the refractory window is discarded.
"""
import numpy as np

from .errors import InvalidRateError, ShapeError
from .models import LifPopulation, SpikeRaster
from .rng import RngStream


def lif_step(pop: LifPopulation, current: np.ndarray) -> np.ndarray:
    """
    Advance a population by one step.

    Args:
        pop: population to mutate in place
        current: input J(t), same shape as the population

    Returns:
        Boolean spike mask of the step.
    """
    current = np.asarray(current, dtype=np.float64)
    if current.shape != pop.shape:
        raise ShapeError(f"current shape {current.shape} does not match population {pop.shape}")

    params = pop.params
    refractory = pop.ref_count > 0
    active = ~refractory

    v = pop.v
    v[active] += params.leak * (-v[active] + current[active])
    v[refractory] = params.v_res

    spikes = active & (v >= params.v_th)
    np.copyto(pop.v_mem, v)

    v[spikes] = params.v_res
    pop.ref_count[refractory] -= 1
    pop.ref_count[spikes] = params.ref_steps
    return spikes


def synaptic_current(weights: np.ndarray, spikes_in: np.ndarray) -> np.ndarray:
    """
    Weighted sum of the synapses that carry a spike this step.

    `weights` has the presynaptic index on its last axis; a 1-D weight
    vector gives a scalar current.
    """
    weights = np.asarray(weights, dtype=np.float64)
    spikes_in = np.asarray(spikes_in).astype(bool)
    if spikes_in.ndim != 1 or weights.shape[-1] != spikes_in.shape[0]:
        raise ShapeError(
            f"weights {weights.shape} incompatible with spike vector {spikes_in.shape}"
        )
    active = np.flatnonzero(spikes_in)
    if active.size == 0:
        return np.zeros(weights.shape[:-1], dtype=np.float64)
    return weights[..., active].sum(axis=-1)


def poisson_encode(image: np.ndarray, i_rate: float, t_ms: float, rng: RngStream, dt: float = 1.0) -> SpikeRaster:
    """
    Encode intensities (0-255) as independent Bernoulli events per step.

    Each pixel fires with probability (intensity / 255) * i_rate * dt / 1000
    at every step. A 2-D image becomes one input map; a (C, H, W) image
    becomes C maps.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[np.newaxis]
    if image.ndim != 3:
        raise ShapeError(f"image must be (H, W) or (C, H, W), got {image.shape}")

    p_max = i_rate * dt / 1000.0
    if p_max > 1.0 or p_max < 0.0:
        raise InvalidRateError(f"i_rate {i_rate} Hz gives per-step probability {p_max:.3f}")

    steps = t_ms / dt
    if steps != int(steps) or steps < 1:
        raise ShapeError(f"window {t_ms} ms is not a positive multiple of dt={dt}")
    steps = int(steps)

    prob = image.astype(np.float64) / 255.0 * p_max
    draws = rng.random((steps, *image.shape))
    return SpikeRaster(draws < prob, dt=dt)


def reset_population(pop: LifPopulation) -> LifPopulation:
    """Clear all state back to rest: v = v_res, no refractory countdown."""
    pop.v.fill(pop.params.v_res)
    pop.v_mem.fill(pop.params.v_res)
    pop.ref_count.fill(0)
    return pop
