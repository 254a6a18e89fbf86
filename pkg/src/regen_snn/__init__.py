"""
regen-snn

Event-driven spiking convolutional networks trained layer by layer with a
regenerative (tied encoder/decoder) rule over LIF membrane potentials, plus
a supervised spike-target readout for classification.
"""

__version__ = "1.0.0"
