import math
import os

import numpy as np
import pytest

from multispike.data import SyntheticTaskSpec, bin_split, generate_synthetic
from multispike.dynamics import SpikeMode
from multispike.errors import ConfigError, DataFormatError
from multispike.network import (NetworkSpec, forward, init_network,
                                named_parameters)
from multispike.train import (AdamState, TrainConfig, adam_step, evaluate,
                              load_checkpoint, project_params,
                              save_checkpoint, train_loop, trainable_names)


def small_net(mode=SpikeMode.SFA, widths=(3, 4, 2), seed=3, **kw):
    spec = NetworkSpec(widths=list(widths), dt=1.0, total_steps=6, mode=mode,
                       kernel_size=4, **kw)
    return init_network(spec, seed=seed, param_jitter=True)


def param_snapshot(net):
    return {name: arr.copy() for name, arr in named_parameters(net)}


# ---------------------------------------------------------------------------
# optimizer math


def test_adam_matches_hand_rolled_scalar_updates():
    # Drive one weight entry with a fixed gradient sequence and replay the
    # bias-corrected update rule in plain python floats.
    net = small_net(seed=0)
    cfg = TrainConfig(lr=0.05, beta1=0.9, beta2=0.999, eps=1e-8)
    opt = AdamState.zeros(net)
    grads = {name: np.zeros_like(arr) for name, arr in named_parameters(net)}

    w = net.layers[0].weights
    w0 = float(w[1, 2])
    g_seq = [0.4, -1.3, 0.7]

    expect = w0
    m = v = 0.0
    for t, g in enumerate(g_seq, start=1):
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        expect -= cfg.lr * m_hat / (math.sqrt(v_hat) + cfg.eps)

        grads["layer0.weights"][1, 2] = g
        adam_step(net, grads, opt, cfg)

    assert abs(float(w[1, 2]) - expect) < 1e-12
    assert opt.step_count == 3


def test_adam_zero_gradient_moves_nothing():
    net = small_net(seed=1)
    before = param_snapshot(net)
    grads = {name: np.zeros_like(arr) for name, arr in named_parameters(net)}
    opt = AdamState.zeros(net)
    for _ in range(3):
        adam_step(net, grads, opt, TrainConfig())
    for name, arr in named_parameters(net):
        np.testing.assert_array_equal(arr, before[name])


def test_adam_touches_only_trainable_leaves():
    net = small_net(mode=SpikeMode.SSP, seed=2)
    before = param_snapshot(net)
    grads = {name: np.ones_like(arr) for name, arr in named_parameters(net)}
    opt = AdamState.zeros(net)
    adam_step(net, grads, opt, TrainConfig(lr=0.1))
    allowed = set(trainable_names(net))
    for name, arr in named_parameters(net):
        if name in allowed:
            assert not np.array_equal(arr, before[name]), name
        else:
            np.testing.assert_array_equal(arr, before[name], err_msg=name)


def test_trainable_names_per_mode():
    def groups(net):
        return {name.rsplit(".", 1)[-1] for name in trainable_names(net)}

    assert groups(small_net(mode=SpikeMode.SFA)) == {
        "weights", "v_threshold", "tau_decay", "q", "a", "b", "delay"}
    assert groups(small_net(mode=SpikeMode.LINEAR)) == {
        "weights", "v_threshold", "tau_decay", "a", "b", "delay"}
    assert groups(small_net(mode=SpikeMode.SSP)) == {"weights", "v_threshold"}

    frozen = small_net(mode=SpikeMode.SFA)
    frozen.kernels_trainable = False
    assert groups(frozen) == {"weights", "v_threshold", "tau_decay", "q"}


def test_projection_clips_out_of_range_leaves():
    net = small_net(seed=4)
    nr = net.layers[0].neuron
    nr.tau_decay[0] = 1.5
    nr.tau_decay[1] = -0.2
    nr.v_threshold[0] = 1e-9
    nr.q[0] = 100.0
    kern = net.layers[0].kernel
    kern.a[0] = -1.0
    kern.b[0] = 0.0
    kern.delay[0] = -0.3
    w_before = net.layers[0].weights.copy()

    project_params(net)

    assert nr.tau_decay[0] == 1.0 - 1e-3
    assert nr.tau_decay[1] == 1e-3
    assert nr.v_threshold[0] == 1e-2
    assert nr.q[0] == 16.0
    assert kern.a[0] == 1e-4
    assert kern.b[0] == 1e-4
    assert kern.delay[0] == 0.0
    np.testing.assert_array_equal(net.layers[0].weights, w_before)


# ---------------------------------------------------------------------------
# evaluation


def test_evaluate_matches_unbatched_forward():
    net = small_net(seed=5)
    rng = np.random.default_rng(9)
    x = rng.poisson(0.8, size=(7, 6, 3)).astype(float)
    y = rng.integers(0, 2, size=7)

    err, loss_val, spikes = evaluate(net, x, y, batch_size=3)

    res = forward(net, x)
    pred = np.argmax(res.logits, axis=1)
    assert err == pytest.approx(np.mean(pred != y), abs=0)
    from multispike.network import loss as net_loss
    assert loss_val == pytest.approx(net_loss(res.logits, y), rel=1e-12)
    assert spikes == pytest.approx(
        [t / 7 for t in res.spike_totals], rel=1e-12)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_is_exact(tmp_path):
    net = small_net(seed=6)
    opt = AdamState.zeros(net)
    for name in opt.m:
        opt.m[name] += 0.25
        opt.v[name] += 0.5
    opt.step_count = 17
    rng = np.random.default_rng(123)
    rng.permutation(50)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, net, opt, epoch=4, shuffle_rng=rng, best_error=0.125)

    other = small_net(seed=7)
    opt2, epoch, rng2, best = load_checkpoint(path, other)
    for name, arr in named_parameters(net):
        np.testing.assert_array_equal(arr, dict(named_parameters(other))[name])
    for name in opt.m:
        np.testing.assert_array_equal(opt.m[name], opt2.m[name])
        np.testing.assert_array_equal(opt.v[name], opt2.v[name])
    assert opt2.step_count == 17
    assert epoch == 4
    assert best == 0.125
    np.testing.assert_array_equal(rng.permutation(50), rng2.permutation(50))


def test_checkpoint_rejects_garbage_and_mismatches(tmp_path):
    net = small_net(seed=8)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, net, AdamState.zeros(net), 0,
                    np.random.default_rng(0), 1.0)

    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
    with pytest.raises(DataFormatError):
        load_checkpoint(bad, net)

    other_shape = small_net(seed=8, widths=(3, 5, 2))
    with pytest.raises(DataFormatError):
        load_checkpoint(path, other_shape)

    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(Exception):
        load_checkpoint(trunc, net)


# ---------------------------------------------------------------------------
# the loop


def easy_task(seed=0):
    return SyntheticTaskSpec(kind="rate_pattern", num_units=8, num_classes=2,
                             duration_ms=32.0, samples_per_class=24,
                             test_samples_per_class=8, rate_low=0.05,
                             rate_high=0.8, seed=seed)


def binned_task(mode, seed=0):
    task = easy_task(seed)
    train, test = generate_synthetic(task)
    binary = mode is SpikeMode.SSP
    steps = int(task.duration_ms / 2.0)
    return (bin_split(train, 2.0, steps, binary=binary),
            bin_split(test, 2.0, steps, binary=binary), steps)


@pytest.mark.parametrize("mode", list(SpikeMode))
def test_loop_learns_separable_task(mode):
    train_xy, test_xy, steps = binned_task(mode)
    spec = NetworkSpec(widths=[8, 12, 2], dt=2.0, total_steps=steps,
                       mode=mode, kernel_size=4)
    net = init_network(spec, seed=11, param_jitter=True)
    cfg = TrainConfig(lr=5e-3, batch_size=16, epochs=10, seed=1)
    rows = train_loop(net, train_xy, test_xy, cfg)
    final_test = [r for r in rows if r.split == "test"][-1]
    assert final_test.error_rate <= 0.125, (mode, final_test.error_rate)
    first_train = rows[0]
    assert final_test.loss < first_train.loss


def test_rerun_writes_identical_csv(tmp_path):
    train_xy, test_xy, steps = binned_task(SpikeMode.SFA)
    spec = NetworkSpec(widths=[8, 10, 2], dt=2.0, total_steps=steps,
                       mode=SpikeMode.SFA, kernel_size=4)
    cfg = TrainConfig(lr=5e-3, batch_size=16, epochs=3, seed=2)

    outs = []
    for run in range(2):
        net = init_network(spec, seed=21, param_jitter=True)
        path = tmp_path / f"metrics_{run}.csv"
        train_loop(net, train_xy, test_xy, cfg, csv_path=path)
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]
    header = outs[0].split(b"\n")[0].decode()
    assert header == "epoch,split,error_rate,loss,spikes_layer_0,spikes_layer_1,seconds"
    # deterministic runs pin the wall-clock column to zero
    for line in outs[0].decode().strip().split("\n")[1:]:
        assert line.endswith(",0.000")


def test_resume_is_bit_for_bit(tmp_path):
    train_xy, test_xy, steps = binned_task(SpikeMode.LINEAR)
    spec = NetworkSpec(widths=[8, 10, 2], dt=2.0, total_steps=steps,
                       mode=SpikeMode.LINEAR, kernel_size=4)

    def fresh():
        return init_network(spec, seed=31, param_jitter=True)

    csv_a = tmp_path / "a.csv"
    ck_a = tmp_path / "a.ck"
    net_a = fresh()
    train_loop(net_a, train_xy, test_xy,
               TrainConfig(lr=5e-3, batch_size=16, epochs=6, seed=3),
               csv_path=csv_a, checkpoint_path=ck_a)

    csv_b = tmp_path / "b.csv"
    ck_b = tmp_path / "b.ck"
    net_b = fresh()
    train_loop(net_b, train_xy, test_xy,
               TrainConfig(lr=5e-3, batch_size=16, epochs=3, seed=3),
               csv_path=csv_b, checkpoint_path=ck_b)
    net_b2 = fresh()
    train_loop(net_b2, train_xy, test_xy,
               TrainConfig(lr=5e-3, batch_size=16, epochs=6, seed=3),
               csv_path=csv_b, checkpoint_path=ck_b, resume=True)

    assert csv_a.read_bytes() == csv_b.read_bytes()
    for name, arr in named_parameters(net_a):
        np.testing.assert_array_equal(arr, dict(named_parameters(net_b2))[name],
                                      err_msg=name)
    last_a = (str(ck_a) + ".last")
    last_b = (str(ck_b) + ".last")
    assert os.path.getsize(last_a) == os.path.getsize(last_b)
    with open(last_a, "rb") as fa, open(last_b, "rb") as fb:
        assert fa.read() == fb.read()


def test_resume_without_checkpoint_raises(tmp_path):
    train_xy, test_xy, steps = binned_task(SpikeMode.SFA)
    spec = NetworkSpec(widths=[8, 10, 2], dt=2.0, total_steps=steps,
                       mode=SpikeMode.SFA, kernel_size=4)
    net = init_network(spec, seed=1, param_jitter=True)
    with pytest.raises(ConfigError, match="resume"):
        train_loop(net, train_xy, test_xy, TrainConfig(epochs=2),
                   csv_path=None, checkpoint_path=tmp_path / "none.ck",
                   resume=True)


def test_best_checkpoint_tracks_lowest_test_error(tmp_path):
    train_xy, test_xy, steps = binned_task(SpikeMode.SFA)
    spec = NetworkSpec(widths=[8, 10, 2], dt=2.0, total_steps=steps,
                       mode=SpikeMode.SFA, kernel_size=4)
    net = init_network(spec, seed=41, param_jitter=True)
    ck = tmp_path / "best.ck"
    rows = train_loop(net, train_xy, test_xy,
                      TrainConfig(lr=5e-3, batch_size=16, epochs=5, seed=4),
                      checkpoint_path=ck)
    best_seen = min(r.error_rate for r in rows if r.split == "test")
    probe = init_network(spec, seed=99, param_jitter=True)
    _, _, _, best_stored = load_checkpoint(ck, probe)
    assert best_stored == best_seen
    err, _, _ = evaluate(probe, *test_xy, batch_size=16)
    assert err == best_seen


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(beta1=1.0).validate()
