"""Spiking-network training engine built around per-step multi-spike counts.

Cells emit integer spike counts each step (optionally with spike-frequency
adaptation) instead of a single binary event, which keeps accuracy usable at
coarse simulation steps.  Gradients come from backprop-through-time over a
recorded tape, with straight-through or rectangular surrogates at the
discretization points.
"""

__version__ = "0.1.0"

from .dynamics import NeuronParams, NeuronState, SpikeMode, step_cell
from .errors import (ConfigError, DataFormatError, EngineError,
                     NumericFaultError, TapeError)
from .network import NetworkSpec, NetworkParams, forward, init_network
from .synapse import KernelParams, sample_kernel, convolve_spikes

__all__ = [
    "ConfigError",
    "DataFormatError",
    "EngineError",
    "KernelParams",
    "NetworkParams",
    "NetworkSpec",
    "NeuronParams",
    "NeuronState",
    "NumericFaultError",
    "SpikeMode",
    "TapeError",
    "convolve_spikes",
    "forward",
    "init_network",
    "sample_kernel",
    "step_cell",
    "__version__",
]
