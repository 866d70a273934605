"""MLP-shaped spiking network: spatio-temporal forward pass and loss.

Layer n at step t computes, from the previous layer's response currents:

    x = O_prev @ W.T              weighted dendrite sum
    i_hat = Filter(x)             negative-masked input current
    v = tau * (v_prev - u_prev) + i_hat
    n*, s, u                      mode-specific spike generation
    O = conv(s, kernel)           outgoing response current (hidden layers)

The input spike train is itself passed through a per-unit response kernel
before the first weight matrix, so every spike source is treated uniformly.
Class logits are the time-summed spike counts of the output layer.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics, synapse
from .dynamics import NeuronParams, SpikeMode
from .errors import ConfigError, NumericFaultError
from .synapse import KernelParams


class Readout:
    SPIKE_COUNT_SUM = "spike_count_sum"


@dataclass
class NetworkSpec:
    """Architecture description: layer widths, step grid, cell mode."""

    widths: list
    dt: float
    total_steps: int
    mode: SpikeMode = SpikeMode.SFA
    kernel_size: int = 8
    readout: str = Readout.SPIKE_COUNT_SUM

    def validate(self):
        if len(self.widths) < 2:
            raise ConfigError("network needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ConfigError("layer widths must be positive")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.readout != Readout.SPIKE_COUNT_SUM:
            raise ConfigError(f"unknown readout {self.readout!r}")


@dataclass
class LayerSpec:
    """One layer's parameters: incoming weights, cell params, outgoing kernel.

    ``kernel`` is None for the output layer, whose response current is unused.
    """

    weights: np.ndarray
    neuron: NeuronParams
    kernel: KernelParams | None

    @property
    def width(self) -> int:
        return self.weights.shape[0]


@dataclass
class NetworkParams:
    """All learnable state of a network plus its architecture spec."""

    spec: NetworkSpec
    input_kernel: KernelParams
    layers: list
    kernels_trainable: bool = True


# ---------------------------------------------------------------------------
# initialization


def init_network(spec: NetworkSpec, seed: int, param_jitter: bool = False) -> NetworkParams:
    """Seeded parameter initialization.

    Weights are zero-mean normal with std sqrt(2 / (fan_in + fan_out)).  Cell
    parameters start at v_threshold = 1.0, tau_decay = 0.7, q = 2.0, with an
    optional +-5% uniform jitter.  Kernel rates are drawn per neuron,
    a ~ U[0.5, 1.5] / (5 dt), b ~ U[0.5, 1.5] / dt, delay ~ U[0, 2 dt], so the
    slow rate always starts below the fast one and every unit gets its own
    temporal profile.
    """
    spec.validate()
    rng = np.random.default_rng(seed)

    def neuron_init(width):
        vth = np.full(width, 1.0)
        tau = np.full(width, 0.7)
        q = np.full(width, 2.0)
        if param_jitter:
            vth = vth * rng.uniform(0.95, 1.05, width)
            tau = tau * rng.uniform(0.95, 1.05, width)
            q = q * rng.uniform(0.95, 1.05, width)
        return NeuronParams(v_threshold=vth, tau_decay=tau, q=q, mode=spec.mode)

    def kernel_init(width):
        a = rng.uniform(0.5, 1.5, width) / (5.0 * spec.dt)
        b = rng.uniform(0.5, 1.5, width) / spec.dt
        delay = rng.uniform(0.0, 2.0 * spec.dt, width)
        return KernelParams(a=a, b=b, delay=delay,
                            kernel_size=spec.kernel_size, dt=spec.dt)

    input_kernel = kernel_init(spec.widths[0])
    layers = []
    for n in range(1, len(spec.widths)):
        fan_out, fan_in = spec.widths[n], spec.widths[n - 1]
        w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_out, fan_in))
        kern = kernel_init(fan_out) if n < len(spec.widths) - 1 else None
        layers.append(LayerSpec(weights=w, neuron=neuron_init(fan_out), kernel=kern))
    return NetworkParams(spec=spec, input_kernel=input_kernel, layers=layers)


def named_parameters(params: NetworkParams):
    """Yield (name, array) for every learnable leaf, in a fixed order.

    Kernel leaves are yielded regardless of ``kernels_trainable``; the
    optimizer and gradcheck decide what to touch.
    """
    yield "input_kernel.a", params.input_kernel.a
    yield "input_kernel.b", params.input_kernel.b
    yield "input_kernel.delay", params.input_kernel.delay
    for n, layer in enumerate(params.layers):
        prefix = f"layer{n}"
        yield f"{prefix}.weights", layer.weights
        yield f"{prefix}.v_threshold", layer.neuron.v_threshold
        yield f"{prefix}.tau_decay", layer.neuron.tau_decay
        yield f"{prefix}.q", layer.neuron.q
        if layer.kernel is not None:
            yield f"{prefix}.kernel.a", layer.kernel.a
            yield f"{prefix}.kernel.b", layer.kernel.b
            yield f"{prefix}.kernel.delay", layer.kernel.delay


PARAM_GROUPS = {
    "weights": "weights",
    "v_threshold": "v_threshold",
    "tau_decay": "tau_decay",
    "q": "q",
    "a": "kernel_a",
    "b": "kernel_b",
    "delay": "kernel_delay",
}


def group_of(name: str) -> str:
    """Map a parameter leaf name to its reporting group."""
    return PARAM_GROUPS[name.rsplit(".", 1)[-1]]


# ---------------------------------------------------------------------------
# tape


@dataclass
class LayerTape:
    """Forward record of one layer over all steps, all arrays [B, T, L]."""

    x: np.ndarray         # pre-filter weighted sum
    i_hat: np.ndarray     # filtered input current
    v: np.ndarray
    n_star: np.ndarray
    s: np.ndarray
    u: np.ndarray
    o: np.ndarray | None  # outgoing response current; None for the output layer


@dataclass
class Tape:
    """Everything the backward sweep needs, immutable once recorded."""

    input_spikes: np.ndarray
    input_response: np.ndarray
    layers: list
    relaxed: bool

    def freeze(self):
        arrays = [self.input_spikes, self.input_response]
        for lt in self.layers:
            arrays += [lt.x, lt.i_hat, lt.v, lt.n_star, lt.s, lt.u]
            if lt.o is not None:
                arrays.append(lt.o)
        for arr in arrays:
            arr.flags.writeable = False


@dataclass
class ForwardResult:
    logits: np.ndarray
    spike_totals: list
    tape: Tape | None


# ---------------------------------------------------------------------------
# forward pass


def run_layer(neuron: NeuronParams, currents: np.ndarray, relaxed: bool = False,
              layer_name: str = "layer"):
    """Step one layer's cells over the whole window.

    ``currents`` is [B, T, L]; returns the stacked (v, n_star, s, u) arrays and
    the running spike total, accumulated step by step as an independent
    counter.
    """
    num_batch, num_steps, width = currents.shape
    v_arr = np.empty((num_batch, num_steps, width))
    n_arr = np.empty_like(v_arr)
    s_arr = np.empty_like(v_arr)
    u_arr = np.empty_like(v_arr)
    state = dynamics.NeuronState.zeros((num_batch, width))
    total = 0.0
    for t in range(num_steps):
        state, out = dynamics.step_cell(state, neuron, currents[:, t],
                                        relaxed=relaxed,
                                        context=f"{layer_name}, step {t}")
        v_arr[:, t] = state.v
        n_arr[:, t] = out.n_star
        s_arr[:, t] = out.s
        u_arr[:, t] = state.u
        total += float(np.sum(out.s))
    return v_arr, n_arr, s_arr, u_arr, total


def _check_finite(arr: np.ndarray, what: str, layer: int):
    if np.all(np.isfinite(arr)):
        return
    bad = np.argwhere(~np.isfinite(arr))[0]
    raise NumericFaultError(
        f"non-finite {what} at layer {layer}, step {bad[1]}, unit {bad[2]}")


def forward(params: NetworkParams, spikes: np.ndarray, record_tape: bool = False,
            relaxed: bool = False) -> ForwardResult:
    """Run the full spatio-temporal forward pass.

    ``spikes`` is [T, L0] or [B, T, L0] of non-negative per-step counts
    (binary when the network mode is SSP).  Logits are the time-summed output
    spike counts, [B, classes].
    """
    spec = params.spec
    # always copy: the tape freezes this array, and it must not alias caller data
    spikes = np.array(spikes, dtype=float)
    if spikes.ndim == 2:
        spikes = spikes[None]
    if spikes.ndim != 3 or spikes.shape[2] != spec.widths[0]:
        raise ConfigError(
            f"input shape {spikes.shape} does not match input width {spec.widths[0]}")
    if spikes.shape[1] != spec.total_steps:
        raise ConfigError(
            f"input has {spikes.shape[1]} steps, network expects {spec.total_steps}")
    if np.any(spikes < 0) or not np.all(np.isfinite(spikes)):
        raise ConfigError("input spike counts must be finite and non-negative")
    if spec.mode is SpikeMode.SSP and np.any(spikes > 1):
        raise ConfigError("SSP-mode networks require binary input spikes")

    o_prev = synapse.convolve_spikes(spikes, synapse.sample_kernel(params.input_kernel))
    input_response = o_prev
    layer_tapes = []
    spike_totals = []
    s_last = None
    for n, layer in enumerate(params.layers):
        x = o_prev @ layer.weights.T
        _check_finite(x, "dendrite sum", n)
        i_hat = synapse.swish(x)
        v, n_star, s, u, total = run_layer(layer.neuron, i_hat, relaxed,
                                           layer_name=f"layer {n}")
        _check_finite(v, "membrane potential", n)
        if layer.kernel is not None:
            o = synapse.convolve_spikes(s, synapse.sample_kernel(layer.kernel))
        else:
            o = None
        layer_tapes.append(LayerTape(x=x, i_hat=i_hat, v=v, n_star=n_star,
                                     s=s, u=u, o=o))
        spike_totals.append(total)
        s_last = s
        o_prev = o

    logits = np.sum(s_last, axis=1)
    tape = None
    if record_tape:
        tape = Tape(input_spikes=spikes, input_response=input_response,
                    layers=layer_tapes, relaxed=relaxed)
        tape.freeze()
    return ForwardResult(logits=logits, spike_totals=spike_totals, tape=tape)


# ---------------------------------------------------------------------------
# loss


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def loss(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy over the batch."""
    value, _ = loss_and_grad(logits, labels)
    return value


def loss_and_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels))
    num_batch, num_classes = logits.shape
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ConfigError(f"label out of range for {num_classes} classes")
    probs = softmax(logits)
    picked = probs[np.arange(num_batch), labels]
    value = float(np.mean(-np.log(np.maximum(picked, 1e-300))))
    grad = probs.copy()
    grad[np.arange(num_batch), labels] -= 1.0
    grad /= num_batch
    return value, grad
