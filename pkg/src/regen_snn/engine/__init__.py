"""Engine subpackage - spiking dynamics, layers and learning rules."""
from .models import (
    Decision,
    KernelStack,
    LayerDescriptor,
    LearnConfig,
    LifParams,
    LifPopulation,
    NetworkTopology,
    SpikeRaster,
)
from .rng import RngStream
from .layers import SpikingNetwork, initialize_weights, parse_topology, run_window
from .regen import RegenLayer, train_layer_on_window
from .readout import classify, evaluate, make_target

__all__ = [
    'Decision', 'KernelStack', 'LayerDescriptor', 'LearnConfig', 'LifParams',
    'LifPopulation', 'NetworkTopology', 'SpikeRaster', 'RngStream',
    'SpikingNetwork', 'initialize_weights', 'parse_topology', 'run_window',
    'RegenLayer', 'train_layer_on_window', 'classify', 'evaluate', 'make_target',
]
