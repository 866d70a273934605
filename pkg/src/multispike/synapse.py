"""Trainable convolutional synapse.

A neuron's outgoing spike train is converted into a response current by a
causal 1-D convolution with a delayed 2-exponential kernel

    K(t) = exp(-a (t - delay)) - exp(-b (t - delay))   for t >= delay, else 0

sampled on the step grid as taps ``c[i] = K(i * dt)``.  The shape rates ``a``,
``b`` and the ``delay`` are learnable per neuron; taps are resampled whenever
they change.  Weighted sums of response currents pass through a negative
masking filter (swish with beta = 10) before reaching the next membrane.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

log = logging.getLogger(__name__)

SWISH_BETA = 10.0


@dataclass
class KernelParams:
    """Per-neuron response-kernel parameters on a fixed step grid.

    ``a`` and ``b`` are inverse-time rates (> 0), ``delay`` a non-negative
    time shift.  The covered window is ``t_k = (kernel_size - 1) * dt``.
    ``a == b`` collapses the kernel to all zeros; allowed, but flagged.
    """

    a: np.ndarray
    b: np.ndarray
    delay: np.ndarray
    kernel_size: int
    dt: float

    @property
    def t_k(self) -> float:
        return (self.kernel_size - 1) * self.dt

    def validate(self):
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if np.any(self.a <= 0) or np.any(self.b <= 0):
            raise ValueError("kernel rates a, b must be positive")
        if np.any(self.delay < 0):
            raise ValueError("delay must be non-negative")

    @property
    def width(self) -> int:
        return self.a.shape[0]


@dataclass
class SampledKernel:
    """Discrete taps ``c[unit, i] = K(i * dt)`` for each neuron."""

    c: np.ndarray


@dataclass
class DendriteFilter:
    """Negative masking filter ``x * sigmoid(beta x)`` with fixed beta = 10."""

    beta: float = SWISH_BETA


DEFAULT_FILTER = DendriteFilter()


def _tap_geometry(params: KernelParams):
    """Per-tap time offsets relative to the delay, and the live-tap mask."""
    t = np.arange(params.kernel_size) * params.dt            # [K]
    rel = t[None, :] - params.delay[:, None]                 # [L, K]
    live = rel >= 0.0
    # zero out dead taps before exponentiating so large delays cannot overflow
    rel_safe = np.where(live, rel, 0.0)
    return rel_safe, live


def sample_kernel(params: KernelParams) -> SampledKernel:
    """Sample the delayed 2-exponential onto the tap grid.

    Recomputed from scratch whenever a, b or delay change, which in training
    is every step.
    """
    rel, live = _tap_geometry(params)
    ea = np.exp(-params.a[:, None] * rel)
    eb = np.exp(-params.b[:, None] * rel)
    c = np.where(live, ea - eb, 0.0)
    degenerate = int(np.sum(params.a == params.b))
    if degenerate:
        log.warning("%d kernel(s) have a == b and are identically zero", degenerate)
    return SampledKernel(c=c)


def convolve_spikes(spikes: np.ndarray, kernel: SampledKernel) -> np.ndarray:
    """Causal per-neuron convolution of a spike train with its sampled kernel.

    ``spikes`` is [..., T, L] (zero history before t = 0); the output current is
    ``o[t] = sum_i spikes[t - i] * c[i]`` with the same shape.  Taps are
    accumulated in ascending i so the result is bit-identical to a direct
    double-loop summation.
    """
    c = kernel.c
    num_steps = spikes.shape[-2]
    out = np.zeros(spikes.shape, dtype=float)
    for i in range(c.shape[1]):
        if i == 0:
            out += spikes * c[:, 0]
        elif i < num_steps:
            out[..., i:, :] += spikes[..., : num_steps - i, :] * c[:, i]
    return out


def collect_future_grads(d_out: np.ndarray, kernel: SampledKernel) -> np.ndarray:
    """Adjoint of :func:`convolve_spikes`: route output-current gradients back
    onto the spike train, ``ds[t] = sum_i d_out[t + i] * c[i]``."""
    c = kernel.c
    num_steps = d_out.shape[-2]
    ds = np.zeros(d_out.shape, dtype=float)
    for i in range(c.shape[1]):
        if i == 0:
            ds += d_out * c[:, 0]
        elif i < num_steps:
            ds[..., : num_steps - i, :] += d_out[..., i:, :] * c[:, i]
    return ds


def swish(x: np.ndarray) -> np.ndarray:
    """Filter(x) = x * sigmoid(beta x); passes positives, masks negatives."""
    return x * _sigmoid(SWISH_BETA * x)


def swish_grad(x: np.ndarray) -> np.ndarray:
    """Filter'(x) = sigmoid(beta x) * (1 + beta x * (1 - sigmoid(beta x)))."""
    sig = _sigmoid(SWISH_BETA * x)
    return sig * (1.0 + SWISH_BETA * x * (1.0 - sig))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branchless overflow-safe logistic
    pos = z >= 0
    e = np.exp(np.where(pos, -z, z))
    return np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))


def dendrite_integrate(o_prev: np.ndarray, weights: np.ndarray,
                       filt: DendriteFilter = DEFAULT_FILTER) -> np.ndarray:
    """Weighted sum of incoming response currents, negative-masked.

    ``o_prev`` is [..., L_prev], ``weights`` is [L, L_prev]; returns the
    filtered input current [..., L] fed to the membrane update.
    """
    if o_prev.shape[-1] != weights.shape[1]:
        raise ConfigError(
            f"dendrite width mismatch: {weights.shape[1]} inputs expected, "
            f"got {o_prev.shape[-1]}")
    del filt  # beta is fixed; the argument keeps the call signature explicit
    return swish(o_prev @ weights.T)


@dataclass
class KernelGrads:
    """Gradient accumulators for the three kernel parameters."""

    a: np.ndarray
    b: np.ndarray
    delay: np.ndarray


def kernel_tap_grads(params: KernelParams):
    """Derivatives of each tap w.r.t. a, b, delay ([L, K] each).

    Dead taps (i * dt <= delay) carry zero for all three: the hard cut at the
    delay crossing takes the subgradient 0.
    """
    rel, live = _tap_geometry(params)
    strict = rel > 0.0
    ea = np.exp(-params.a[:, None] * rel)
    eb = np.exp(-params.b[:, None] * rel)
    dc_da = np.where(strict, -rel * ea, 0.0)
    dc_db = np.where(strict, rel * eb, 0.0)
    dc_ddelay = np.where(strict, params.a[:, None] * ea - params.b[:, None] * eb, 0.0)
    return dc_da, dc_db, dc_ddelay


def kernel_gradients(upstream: np.ndarray, spikes: np.ndarray,
                     params: KernelParams) -> tuple[KernelGrads, np.ndarray]:
    """Backward pass of the convolution.

    ``upstream`` is dL/do over the whole train ([..., T, L]); returns the
    per-neuron gradients for (a, b, delay) plus dL/dspikes (same shape as the
    spike train), the latter collected over each spike's forward influence
    window o(t .. t + t_k).
    """
    kernel = sample_kernel(params)
    d_spikes = collect_future_grads(upstream, kernel)
    num_steps = upstream.shape[-2]
    flat_up = upstream.reshape(-1, num_steps, upstream.shape[-1])
    flat_sp = spikes.reshape(-1, num_steps, spikes.shape[-1])
    dc = np.zeros_like(kernel.c)
    for i in range(params.kernel_size):
        if i == 0:
            dc[:, 0] = np.einsum("btl,btl->l", flat_up, flat_sp)
        elif i < num_steps:
            dc[:, i] = np.einsum("btl,btl->l", flat_up[:, i:], flat_sp[:, : num_steps - i])
    dc_da, dc_db, dc_ddelay = kernel_tap_grads(params)
    return KernelGrads(a=np.sum(dc * dc_da, axis=1),
                       b=np.sum(dc * dc_db, axis=1),
                       delay=np.sum(dc * dc_ddelay, axis=1)), d_spikes
