"""Training loop: Adam with parameter projection, metrics, checkpoints.

The loop is deterministic end to end: shuffling comes from a dedicated
generator seeded by the run config, metric rows format floats exactly, and
the wall-clock column stays at zero unless timing is explicitly requested,
so reruns produce byte-identical metric files.  Checkpoints carry the
optimizer moments and the shuffle generator state, which makes a resumed run
bit-for-bit equal to an uninterrupted one.
"""
from __future__ import annotations

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import bptt, network
from .dynamics import SpikeMode
from .errors import ConfigError, DataFormatError
from .network import NetworkParams, named_parameters

CHECKPOINT_MAGIC = b"MSPCKPT1"


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("lr, batch_size and epochs must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First and second moments per parameter leaf, plus the step counter."""

    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: NetworkParams) -> "AdamState":
        state = cls()
        for name, arr in named_parameters(params):
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def trainable_names(params: NetworkParams):
    """Leaves the optimizer is allowed to touch, by mode.

    The binary mode trains only weights and thresholds; the non-adaptive mode
    everything but the (unused) adaptation base; frozen kernels drop out of
    every mode.
    """
    mode = params.spec.mode
    names = []
    for name, _ in named_parameters(params):
        group = network.group_of(name)
        if mode is SpikeMode.SSP and group not in ("weights", "v_threshold"):
            continue
        if mode is SpikeMode.LINEAR and group == "q":
            continue
        if group.startswith("kernel") and not params.kernels_trainable:
            continue
        names.append(name)
    return names


def adam_step(params: NetworkParams, grads: dict, state: AdamState,
              cfg: TrainConfig):
    """One bias-corrected Adam update, in place, followed by projection."""
    state.step_count += 1
    t = state.step_count
    leaves = dict(named_parameters(params))
    for name in trainable_names(params):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        leaves[name] -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    project_params(params)


# feasible boxes re-imposed after every optimizer step
TAU_BOUNDS = (1e-3, 1.0 - 1e-3)
VTH_MIN = 1e-2
Q_BOUNDS = (1.0 + 1e-3, 16.0)
RATE_MIN = 1e-4


def project_params(params: NetworkParams):
    """Clip every constrained leaf back into its valid range, in place."""
    def clip_kernel(kern):
        np.clip(kern.a, RATE_MIN, None, out=kern.a)
        np.clip(kern.b, RATE_MIN, None, out=kern.b)
        np.clip(kern.delay, 0.0, None, out=kern.delay)

    clip_kernel(params.input_kernel)
    for layer in params.layers:
        nr = layer.neuron
        np.clip(nr.tau_decay, TAU_BOUNDS[0], TAU_BOUNDS[1], out=nr.tau_decay)
        np.clip(nr.v_threshold, VTH_MIN, None, out=nr.v_threshold)
        np.clip(nr.q, Q_BOUNDS[0], Q_BOUNDS[1], out=nr.q)
        if layer.kernel is not None:
            clip_kernel(layer.kernel)


# ---------------------------------------------------------------------------
# evaluation and metrics


@dataclass
class EpochMetrics:
    epoch: int
    split: str
    error_rate: float
    loss: float
    spikes_per_layer: list
    seconds: float


def metrics_header(num_layers: int) -> str:
    spikes = ",".join(f"spikes_layer_{n}" for n in range(num_layers))
    return f"epoch,split,error_rate,loss,{spikes},seconds"


def format_metrics_row(m: EpochMetrics) -> str:
    cells = [str(m.epoch), m.split, repr(float(m.error_rate)),
             repr(float(m.loss))]
    cells += [repr(float(s)) for s in m.spikes_per_layer]
    cells.append(f"{m.seconds:.3f}")
    return ",".join(cells)


def _batches(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def evaluate(net: NetworkParams, x: np.ndarray, y: np.ndarray,
             batch_size: int = 32):
    """Error rate, mean loss, and mean per-layer spikes per sample."""
    n = x.shape[0]
    wrong = 0
    loss_sum = 0.0
    spike_sums = np.zeros(len(net.layers))
    for batch in _batches(n, batch_size):
        res = network.forward(net, x[batch])
        pred = np.argmax(res.logits, axis=1)
        wrong += int(np.sum(pred != y[batch]))
        loss_sum += network.loss(res.logits, y[batch]) * len(batch)
        spike_sums += np.asarray(res.spike_totals)
    return wrong / n, loss_sum / n, (spike_sums / n).tolist()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: NetworkParams, opt: AdamState, epoch: int,
                    shuffle_rng: np.random.Generator, best_error: float):
    """Single-file binary checkpoint: magic, JSON meta, raw float64 arrays."""
    entries = []
    blobs = []
    for kind, source in (("param", dict(named_parameters(net))),
                         ("m", opt.m), ("v", opt.v)):
        for name in sorted(source):
            arr = np.ascontiguousarray(source[name], dtype=np.float64)
            entries.append({"kind": kind, "name": name, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    meta = {
        "epoch": epoch,
        "step_count": opt.step_count,
        "best_error": best_error,
        "rng_state": shuffle_rng.bit_generator.state,
        "arrays": entries,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path, net: NetworkParams):
    """Restore parameters in place; returns (opt, epoch, rng, best_error)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataFormatError(f"{path} is not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    (meta_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    meta = json.loads(raw[off:off + meta_len].decode())
    off += meta_len

    leaves = dict(named_parameters(net))
    opt = AdamState.zeros(net)
    targets = {"param": leaves, "m": opt.m, "v": opt.v}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype=np.float64, count=count, offset=off)
        off += arr.nbytes
        dest = targets[entry["kind"]].get(entry["name"])
        if dest is None or dest.shape != shape:
            raise DataFormatError(
                f"checkpoint array {entry['kind']}:{entry['name']} {shape} "
                f"does not fit the network")
        dest[...] = arr.reshape(shape)
    if off != len(raw):
        raise DataFormatError(f"{len(raw) - off} trailing bytes in {path}")
    opt.step_count = meta["step_count"]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return opt, meta["epoch"], rng, meta["best_error"]


# ---------------------------------------------------------------------------
# the loop


def train_loop(net: NetworkParams, train_xy, test_xy, cfg: TrainConfig,
               csv_path=None, checkpoint_path=None, timing: bool = False,
               resume: bool = False, log_fn=None):
    """Run ``cfg.epochs`` epochs; returns the metric rows in emission order.

    Per epoch: shuffled minibatch pass (forward with tape, backward, Adam,
    projection), then a test-split evaluation.  The best-by-test-error
    parameters go to ``checkpoint_path``, the rolling state to
    ``<checkpoint_path>.last``; ``resume`` continues from the rolling file.
    """
    cfg.validate()
    x_train, y_train = train_xy
    x_test, y_test = test_xy
    n = x_train.shape[0]
    num_layers = len(net.layers)

    start_epoch = 0
    best_error = np.inf
    opt = AdamState.zeros(net)
    shuffle_rng = np.random.default_rng(cfg.seed)
    last_path = str(checkpoint_path) + ".last" if checkpoint_path else None
    if resume:
        if not (last_path and os.path.exists(last_path)):
            raise ConfigError("resume requested but no rolling checkpoint found")
        opt, done_epoch, shuffle_rng, best_error = load_checkpoint(last_path, net)
        start_epoch = done_epoch + 1

    csv_fh = None
    if csv_path:
        mode = "a" if resume else "w"
        csv_fh = open(csv_path, mode, newline="")
        if not resume:
            csv_fh.write(metrics_header(num_layers) + "\n")

    rows = []

    def emit(metrics: EpochMetrics):
        rows.append(metrics)
        if csv_fh:
            csv_fh.write(format_metrics_row(metrics) + "\n")
            csv_fh.flush()
        if log_fn:
            log_fn(metrics)

    try:
        for epoch in range(start_epoch, cfg.epochs):
            tic = time.perf_counter()
            order = shuffle_rng.permutation(n)
            wrong = 0
            loss_sum = 0.0
            spike_sums = np.zeros(num_layers)
            for batch in _batches(n, cfg.batch_size, order):
                res = network.forward(net, x_train[batch], record_tape=True)
                value, dlogits = network.loss_and_grad(res.logits, y_train[batch])
                grads = bptt.backward(res.tape, net, dlogits)
                adam_step(net, grads, opt, cfg)
                pred = np.argmax(res.logits, axis=1)
                wrong += int(np.sum(pred != y_train[batch]))
                loss_sum += value * len(batch)
                spike_sums += np.asarray(res.spike_totals)
            seconds = time.perf_counter() - tic if timing else 0.0
            emit(EpochMetrics(epoch=epoch, split="train", error_rate=wrong / n,
                              loss=loss_sum / n,
                              spikes_per_layer=(spike_sums / n).tolist(),
                              seconds=seconds))

            tic = time.perf_counter()
            err, test_loss, test_spikes = evaluate(net, x_test, y_test,
                                                   cfg.batch_size)
            seconds = time.perf_counter() - tic if timing else 0.0
            emit(EpochMetrics(epoch=epoch, split="test", error_rate=err,
                              loss=test_loss, spikes_per_layer=test_spikes,
                              seconds=seconds))

            if err < best_error:
                best_error = err
                if checkpoint_path:
                    save_checkpoint(checkpoint_path, net, opt, epoch,
                                    shuffle_rng, best_error)
            if checkpoint_path:
                save_checkpoint(last_path, net, opt, epoch, shuffle_rng,
                                best_error)
    finally:
        if csv_fh:
            csv_fh.close()
    return rows
