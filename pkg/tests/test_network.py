"""Whole-network forward-pass tests.

The central oracle is a scalar re-transcription of the dynamics: plain Python
loops over samples, steps and units, built only from the defining formulas,
with no shared code beyond the parameter containers.
"""
import math

import numpy as np
import pytest

from multispike import network
from multispike.dynamics import SpikeMode
from multispike.errors import ConfigError
from multispike.network import (NetworkSpec, forward, init_network,
                                loss_and_grad, named_parameters)


def spec_4_3_2(mode=SpikeMode.SFA, steps=8):
    return NetworkSpec(widths=[4, 3, 2], dt=1.0, total_steps=steps, mode=mode,
                       kernel_size=5)


# ---------------------------------------------------------------------------
# scalar transcription oracle


def scalar_taps(kern, l):
    taps = []
    for i in range(kern.kernel_size):
        rel = i * kern.dt - kern.delay[l]
        if rel >= 0.0:
            taps.append(math.exp(-kern.a[l] * rel) - math.exp(-kern.b[l] * rel))
        else:
            taps.append(0.0)
    return taps


def scalar_conv(train, taps):
    num_t = len(train)
    return [sum(train[t - i] * taps[i] for i in range(len(taps)) if t - i >= 0)
            for t in range(num_t)]


def scalar_swish(x):
    return x / (1.0 + math.exp(-10.0 * x)) if x > -70.0 else 0.0


def scalar_forward(net, spikes):
    num_b, num_t, _ = spikes.shape
    mode = net.spec.mode
    logits = np.zeros((num_b, net.spec.widths[-1]))
    for b in range(num_b):
        response = []
        for l in range(net.spec.widths[0]):
            taps = scalar_taps(net.input_kernel, l)
            response.append(scalar_conv([spikes[b, t, l] for t in range(num_t)], taps))
        for n, layer in enumerate(net.layers):
            width = layer.weights.shape[0]
            out_trains = []
            for l in range(width):
                vth = layer.neuron.v_threshold[l]
                tau = layer.neuron.tau_decay[l]
                q = layer.neuron.q[l]
                v = u = 0.0
                train = []
                for t in range(num_t):
                    x = sum(layer.weights[l, m] * response[m][t]
                            for m in range(len(response)))
                    v = tau * (v - u) + scalar_swish(x)
                    if mode is SpikeMode.SSP:
                        s = 1.0 if v >= vth else 0.0
                        u = v * s
                    elif mode is SpikeMode.SFA:
                        arg = (v / vth) * (q - 1.0) + 1.0
                        n_star = math.log(arg) / math.log(q) if arg > 1.0 else 0.0
                        s = math.floor(min(n_star, 64.0))
                        u = (q ** s - 1.0) / (q - 1.0) * vth
                    else:
                        n_star = max(v / vth, 0.0)
                        s = math.floor(min(n_star, 64.0))
                        u = s * vth
                    train.append(s)
                out_trains.append(train)
            if n < len(net.layers) - 1:
                response = [scalar_conv(out_trains[l], scalar_taps(layer.kernel, l))
                            for l in range(width)]
            else:
                for c in range(width):
                    logits[b, c] = sum(out_trains[c])
    return logits


@pytest.mark.parametrize("mode", [SpikeMode.SFA, SpikeMode.LINEAR, SpikeMode.SSP])
def test_forward_matches_scalar_transcription(mode):
    rng = np.random.default_rng(11)
    net = init_network(spec_4_3_2(mode), seed=0, param_jitter=True)
    for layer in net.layers:
        layer.weights *= 3.0
    if mode is SpikeMode.SSP:
        spikes = (rng.random((3, 8, 4)) < 0.5).astype(float)
    else:
        spikes = rng.integers(0, 4, size=(3, 8, 4)).astype(float)
    got = forward(net, spikes).logits
    want = scalar_forward(net, spikes)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    assert np.sum(want) > 0.0  # a silent network would make this vacuous


def test_forward_deterministic_and_init_reproducible():
    spec = spec_4_3_2()
    net1 = init_network(spec, seed=9, param_jitter=True)
    net2 = init_network(spec, seed=9, param_jitter=True)
    for (n1, a1), (n2, a2) in zip(named_parameters(net1), named_parameters(net2)):
        assert n1 == n2
        np.testing.assert_array_equal(a1, a2)
    spikes = np.random.default_rng(0).integers(0, 3, size=(2, 8, 4)).astype(float)
    np.testing.assert_array_equal(forward(net1, spikes).logits,
                                  forward(net2, spikes).logits)


def test_different_seed_different_weights():
    spec = spec_4_3_2()
    w1 = init_network(spec, seed=1).layers[0].weights
    w2 = init_network(spec, seed=2).layers[0].weights
    assert np.any(w1 != w2)


# ---------------------------------------------------------------------------
# initialization ranges


def test_init_ranges():
    spec = NetworkSpec(widths=[30, 20, 10], dt=2.0, total_steps=4)
    net = init_network(spec, seed=3, param_jitter=True)
    for layer in net.layers:
        nr = layer.neuron
        assert np.all((nr.v_threshold >= 0.95) & (nr.v_threshold <= 1.05))
        assert np.all((nr.tau_decay >= 0.7 * 0.95) & (nr.tau_decay <= 0.7 * 1.05))
        assert np.all((nr.q >= 1.9) & (nr.q <= 2.1))
    kernels = [net.input_kernel] + [l.kernel for l in net.layers if l.kernel]
    for kern in kernels:
        assert np.all(kern.b > kern.a)  # decay slower than rise, always, at init
        assert np.all((kern.delay >= 0.0) & (kern.delay <= 2.0 * spec.dt))
        assert np.all((kern.a >= 0.5 / (5 * spec.dt)) & (kern.a <= 1.5 / (5 * spec.dt)))
        assert np.all((kern.b >= 0.5 / spec.dt) & (kern.b <= 1.5 / spec.dt))
    assert net.layers[-1].kernel is None  # output response current is unused
    w = init_network(NetworkSpec(widths=[200, 300], dt=1.0, total_steps=1),
                     seed=0).layers[0].weights
    assert np.std(w) == pytest.approx(np.sqrt(2.0 / 500.0), rel=0.05)
    assert np.mean(w) == pytest.approx(0.0, abs=0.01)


def test_no_jitter_gives_stock_values():
    net = init_network(spec_4_3_2(), seed=3)
    nr = net.layers[0].neuron
    np.testing.assert_array_equal(nr.v_threshold, 1.0)
    np.testing.assert_array_equal(nr.tau_decay, 0.7)
    np.testing.assert_array_equal(nr.q, 2.0)


def test_named_parameters_fixed_order():
    net = init_network(spec_4_3_2(), seed=0)
    names = [n for n, _ in named_parameters(net)]
    assert names == [
        "input_kernel.a", "input_kernel.b", "input_kernel.delay",
        "layer0.weights", "layer0.v_threshold", "layer0.tau_decay", "layer0.q",
        "layer0.kernel.a", "layer0.kernel.b", "layer0.kernel.delay",
        "layer1.weights", "layer1.v_threshold", "layer1.tau_decay", "layer1.q",
    ]
    assert network.group_of("layer0.kernel.a") == "kernel_a"
    assert network.group_of("layer1.weights") == "weights"


# ---------------------------------------------------------------------------
# bookkeeping and guards


def test_spike_totals_match_tape():
    rng = np.random.default_rng(6)
    net = init_network(spec_4_3_2(), seed=5, param_jitter=True)
    for layer in net.layers:
        layer.weights *= 3.0
    spikes = rng.integers(0, 4, size=(2, 8, 4)).astype(float)
    res = forward(net, spikes, record_tape=True)
    for total, lt in zip(res.spike_totals, res.tape.layers):
        assert total == float(np.sum(lt.s))
    np.testing.assert_array_equal(res.logits, np.sum(res.tape.layers[-1].s, axis=1))


def test_tape_is_frozen():
    net = init_network(spec_4_3_2(), seed=5)
    spikes = np.zeros((1, 8, 4))
    res = forward(net, spikes, record_tape=True)
    with pytest.raises(ValueError):
        res.tape.layers[0].v[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        res.tape.input_spikes[0, 0, 0] = 1.0


def test_input_guards():
    net = init_network(spec_4_3_2(), seed=0)
    with pytest.raises(ConfigError, match="input width"):
        forward(net, np.zeros((1, 8, 5)))
    with pytest.raises(ConfigError, match="steps"):
        forward(net, np.zeros((1, 7, 4)))
    with pytest.raises(ConfigError, match="non-negative"):
        forward(net, -np.ones((1, 8, 4)))
    ssp_net = init_network(spec_4_3_2(SpikeMode.SSP), seed=0)
    with pytest.raises(ConfigError, match="binary"):
        forward(ssp_net, 2.0 * np.ones((1, 8, 4)))


def test_single_sample_input_promoted():
    net = init_network(spec_4_3_2(), seed=0)
    res = forward(net, np.zeros((8, 4)))
    assert res.logits.shape == (1, 2)


def test_spec_validation():
    with pytest.raises(ConfigError):
        NetworkSpec(widths=[4], dt=1.0, total_steps=8).validate()
    with pytest.raises(ConfigError):
        NetworkSpec(widths=[4, 2], dt=0.0, total_steps=8).validate()
    with pytest.raises(ConfigError):
        NetworkSpec(widths=[4, 2], dt=1.0, total_steps=0).validate()
    with pytest.raises(ConfigError):
        NetworkSpec(widths=[4, 2], dt=1.0, total_steps=8, readout="max").validate()


# ---------------------------------------------------------------------------
# loss


def test_loss_oracle():
    # hand value: -log softmax_2([1, 2, 3]) = log(1 + e^-1 + e^-2)
    value, grad = loss_and_grad(np.array([[1.0, 2.0, 3.0]]), np.array([2]))
    assert value == pytest.approx(0.40760596444438, abs=1e-9)
    p = np.exp([1.0, 2.0, 3.0]) / np.sum(np.exp([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(grad[0], p - np.array([0.0, 0.0, 1.0]), rtol=1e-12)


def test_loss_batch_mean_and_grad_scaling():
    logits = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
    value, grad = loss_and_grad(logits, np.array([2, 2]))
    assert value == pytest.approx(0.40760596444438, abs=1e-9)
    one, g1 = loss_and_grad(logits[:1], np.array([2]))
    np.testing.assert_allclose(grad[0], g1[0] / 2.0, rtol=1e-12)


def test_loss_shift_invariance_huge_logits():
    value, _ = loss_and_grad(np.array([[1000.0, 1001.0]]), np.array([1]))
    assert value == pytest.approx(np.log1p(np.exp(-1.0)), rel=1e-9)


def test_loss_label_guard():
    with pytest.raises(ConfigError):
        loss_and_grad(np.array([[1.0, 2.0]]), np.array([2]))
