"""Experiment orchestration: config-driven runs, sweeps, twin comparisons.

Every function here writes CSV files whose bytes depend only on the config
and seeds, never on wall-clock or filesystem iteration order.  Comparison
commands train twin models from identical initial parameters so differences
come only from the varied setting.
"""
from __future__ import annotations

import concurrent.futures
import copy
import math
import os

import numpy as np

from . import data as data_mod
from . import network, train
from .data import SyntheticTaskSpec, bin_split, generate_synthetic, load_dataset_dir
from .dynamics import NeuronParams, NeuronState, SpikeMode, step_cell
from .errors import ConfigError, DataFormatError, EngineError
from .network import NetworkSpec
from .synapse import KernelParams, convolve_spikes, sample_kernel
from .train import TrainConfig, train_loop


# ---------------------------------------------------------------------------
# config to objects


def build_task(cfg: dict) -> SyntheticTaskSpec:
    fields = dict(cfg["data"]["task"])
    if fields["kind"] == "temporal_order":
        fields.setdefault("num_classes", 2)
    task = SyntheticTaskSpec(**fields)
    task.validate()
    return task


def _load_streams(cfg: dict):
    """Labeled event streams for both splits, plus the stream duration in ms."""
    data_cfg = cfg["data"]
    if data_cfg["source"] == "synthetic":
        task = build_task(cfg)
        train_s, test_s = generate_synthetic(task)
        return train_s, test_s, task.duration_ms

    fmt = data_cfg["source"]
    merge = data_cfg["merge_polarity"]
    train_s = load_dataset_dir(data_cfg["train_dir"], fmt=fmt,
                               merge_polarity=merge)
    test_s = load_dataset_dir(data_cfg["test_dir"], fmt=fmt,
                              merge_polarity=merge)
    width = cfg["network"]["widths"][0]
    found = train_s[0].stream.num_units
    if found != width:
        raise ConfigError(
            f"network.widths[0]={width} but the dataset carries {found} units")
    duration_us = max(s.stream.duration_us for s in train_s + test_s)
    return train_s, test_s, duration_us / 1000.0


def _resolve_steps(cfg: dict, duration_ms: float, dt: float) -> int:
    given = cfg["network"].get("total_steps")
    if given is not None:
        return given
    return int(math.ceil(duration_ms / dt - 1e-9))


def build_spec(cfg: dict, *, dt=None, total_steps=None, mode=None) -> NetworkSpec:
    net_cfg = cfg["network"]
    return NetworkSpec(
        widths=list(net_cfg["widths"]),
        dt=float(dt if dt is not None else net_cfg["dt"]),
        total_steps=int(total_steps),
        mode=SpikeMode(mode if mode is not None else net_cfg["mode"]),
        kernel_size=cfg["synapse"]["kernel_size"],
    )


def build_train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(lr=t["lr"], batch_size=t["batch_size"],
                       epochs=t["epochs"], seed=t["seed"], beta1=t["beta1"],
                       beta2=t["beta2"], eps=t["eps"])


def _training_run(cfg: dict, *, dt=None, mode=None, csv_path=None,
                  checkpoint_path=None, resume=False):
    """Train one model described by ``cfg`` (with optional dt/mode override)."""
    train_s, test_s, duration_ms = _load_streams(cfg)
    eff_dt = float(dt if dt is not None else cfg["network"]["dt"])
    if dt is not None:
        # an overridden step length re-bins the whole window; the config's
        # explicit step count only applies at the config's own dt
        steps = int(math.ceil(duration_ms / eff_dt - 1e-9))
    else:
        steps = _resolve_steps(cfg, duration_ms, eff_dt)
    spec = build_spec(cfg, dt=eff_dt, total_steps=steps, mode=mode)
    spec.validate()
    binary = spec.mode is SpikeMode.SSP
    train_xy = bin_split(train_s, eff_dt, steps, binary=binary)
    test_xy = bin_split(test_s, eff_dt, steps, binary=binary)

    net = network.init_network(spec, seed=cfg["synapse"]["init_seed"],
                               param_jitter=cfg["network"]["param_jitter"])
    net.kernels_trainable = cfg["synapse"]["trainable"]
    rows = train_loop(net, train_xy, test_xy, build_train_config(cfg),
                      csv_path=csv_path, checkpoint_path=checkpoint_path,
                      timing=cfg["output"]["timing"], resume=resume)
    return rows, net, (train_xy, test_xy)


def _resolve_out(out_dir, name):
    if name is None:
        return None
    return name if os.path.isabs(name) else os.path.join(out_dir, name)


def final_test_error(rows) -> float:
    return [r for r in rows if r.split == "test"][-1].error_rate


# ---------------------------------------------------------------------------
# commands


def run_train(cfg: dict, out_dir: str = ".", resume: bool = False):
    """Full training run with CSV and checkpoints under ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    rows, net, _ = _training_run(
        cfg,
        csv_path=_resolve_out(out_dir, cfg["output"]["csv"]),
        checkpoint_path=_resolve_out(out_dir, cfg["output"]["checkpoint"]),
        resume=resume)
    return rows


def run_eval(cfg: dict, out_dir: str = ".", checkpoint_path=None):
    """Evaluate a stored checkpoint on the test split: (error_rate, loss)."""
    train_s, test_s, duration_ms = _load_streams(cfg)
    dt = cfg["network"]["dt"]
    steps = _resolve_steps(cfg, duration_ms, dt)
    spec = build_spec(cfg, dt=dt, total_steps=steps)
    spec.validate()
    test_xy = bin_split(test_s, dt, steps,
                        binary=spec.mode is SpikeMode.SSP)
    net = network.init_network(spec, seed=cfg["synapse"]["init_seed"],
                               param_jitter=cfg["network"]["param_jitter"])
    if checkpoint_path is None:
        checkpoint_path = _resolve_out(out_dir, cfg["output"]["checkpoint"])
    train.load_checkpoint(checkpoint_path, net)
    err, loss_val, _ = evaluate_xy(net, test_xy, cfg["train"]["batch_size"])
    return err, loss_val


def evaluate_xy(net, xy, batch_size):
    return train.evaluate(net, xy[0], xy[1], batch_size)


def _sweep_cell(payload):
    cfg, dt, pattern = payload
    if pattern == "ssp":
        mode = "ssp"
    else:
        base = cfg["network"]["mode"]
        mode = base if base != "ssp" else "sfa"
    rows, _, _ = _training_run(cfg, dt=dt, mode=mode)
    return dt, pattern, final_test_error(rows)


def sweep_dt(cfg: dict, dt_list, out_dir: str = ".", threads: int = 1):
    """Train one model per (step length, spike pattern) cell.

    The multi-spike cells inherit the config's mode (falling back to the
    adaptive one if the config says binary); the binary cells force it.
    Returns the rows [(dt, pattern, final_error)] and writes sweep_dt.csv.
    """
    if not dt_list or any(d <= 0 for d in dt_list):
        raise ConfigError("step-length list must be non-empty and positive")
    jobs = [(cfg, float(dt), pattern)
            for dt in dt_list for pattern in ("msp", "ssp")]
    if threads > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(_sweep_cell, jobs))
    else:
        results = [_sweep_cell(job) for job in jobs]

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "sweep_dt.csv")
    with open(path, "w", newline="") as fh:
        fh.write("dt,pattern,final_error\n")
        for dt, pattern, err in results:
            fh.write(f"{repr(float(dt))},{pattern},{repr(float(err))}\n")
    return results, path


def _twin_csv(path, rows_by_variant, spikes: bool):
    with open(path, "w", newline="") as fh:
        head = "epoch,variant,split,error_rate,loss"
        fh.write(head + (",spikes_total\n" if spikes else "\n"))
        for variant, rows in rows_by_variant:
            for r in rows:
                line = (f"{r.epoch},{variant},{r.split},"
                        f"{repr(float(r.error_rate))},{repr(float(r.loss))}")
                if spikes:
                    line += f",{repr(float(sum(r.spikes_per_layer)))}"
                fh.write(line + "\n")


def compare_sfa(cfg: dict, out_dir: str = "."):
    """Twin run, adaptive vs non-adaptive multi-spike, identical seeds.

    Writes compare_sfa.csv and returns a summary with the final test errors
    and the non-adaptive/adaptive spike ratio at the last epoch.
    """
    runs = []
    for variant, mode in (("sfa", "sfa"), ("linear", "linear")):
        rows, _, _ = _training_run(cfg, mode=mode)
        runs.append((variant, rows))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "compare_sfa.csv")
    _twin_csv(path, runs, spikes=True)

    def last_test(rows):
        return [r for r in rows if r.split == "test"][-1]

    sfa_last = last_test(runs[0][1])
    lin_last = last_test(runs[1][1])
    sfa_spikes = sum(sfa_last.spikes_per_layer)
    lin_spikes = sum(lin_last.spikes_per_layer)
    summary = {
        "sfa_error": sfa_last.error_rate,
        "linear_error": lin_last.error_rate,
        "sfa_spikes": sfa_spikes,
        "linear_spikes": lin_spikes,
        "spike_ratio": lin_spikes / sfa_spikes if sfa_spikes > 0 else math.inf,
    }
    return summary, path


def compare_plasticity(cfg: dict, out_dir: str = "."):
    """Twin run, trainable vs frozen synapse kernels, identical seeds.

    Writes compare_plasticity.csv and returns test losses at half and full
    epoch budget plus final errors for both variants.
    """
    runs = []
    for variant, trainable in (("trainable", True), ("frozen", False)):
        sub = copy.deepcopy(cfg)
        sub["synapse"]["trainable"] = trainable
        rows, _, _ = _training_run(sub)
        runs.append((variant, rows))
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "compare_plasticity.csv")
    _twin_csv(path, runs, spikes=False)

    epochs = cfg["train"]["epochs"]
    half = max(0, math.ceil(epochs / 2) - 1)

    def test_rows(rows):
        return [r for r in rows if r.split == "test"]

    summary = {}
    for variant, rows in runs:
        tr = test_rows(rows)
        summary[variant] = {
            "half_loss": tr[half].loss,
            "final_loss": tr[-1].loss,
            "final_error": tr[-1].error_rate,
        }
    return summary, path


# ---------------------------------------------------------------------------
# single-neuron trace


TRACE_COLUMNS = ("step", "drive", "potential", "n_star", "spikes",
                 "consumed", "output")


def trace_neuron(mode: SpikeMode, v_threshold: float, tau_decay: float,
                 q: float, dt: float, drive, kernel=None):
    """Step one neuron over an explicit drive schedule.

    ``drive`` is a 1-D sequence of per-step input currents (already filtered;
    this bypasses the dendrite so figure-style cases can pin exact values).
    ``kernel`` is an optional (a, b, delay) triple; when given, the output
    column carries the kernel-filtered spike train, otherwise the raw counts.
    Returns a list of per-step dicts keyed by TRACE_COLUMNS.
    """
    drive = np.asarray(drive, dtype=float)
    if drive.ndim != 1 or drive.size == 0 or not np.all(np.isfinite(drive)):
        raise ConfigError("drive schedule must be a non-empty 1-D finite array")
    if isinstance(mode, str):
        try:
            mode = SpikeMode(mode)
        except ValueError as exc:
            raise ConfigError(f"unknown mode {mode!r}") from exc
    params = NeuronParams(v_threshold=np.array([float(v_threshold)]),
                          tau_decay=np.array([float(tau_decay)]),
                          q=np.array([float(q)]), mode=mode)
    try:
        params.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    state = NeuronState.zeros(1)
    v, n_star, s, u = [], [], [], []
    for current in drive:
        state, out = step_cell(state, params, np.array([current]))
        v.append(float(state.v[0]))
        n_star.append(float(out.n_star[0]))
        s.append(float(out.s[0]))
        u.append(float(state.u[0]))

    spikes = np.array(s)
    if kernel is not None:
        a, b, delay = kernel
        kp = KernelParams(a=np.array([float(a)]), b=np.array([float(b)]),
                          delay=np.array([float(delay)]),
                          kernel_size=min(drive.size, 64), dt=float(dt))
        try:
            kp.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        output = convolve_spikes(spikes[None, :, None], sample_kernel(kp))[0, :, 0]
    else:
        output = spikes

    rows = []
    for t in range(drive.size):
        rows.append({"step": t, "drive": float(drive[t]), "potential": v[t],
                     "n_star": n_star[t], "spikes": s[t], "consumed": u[t],
                     "output": float(output[t])})
    return rows


def write_trace_csv(rows, path):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(TRACE_COLUMNS) + "\n")
        for r in rows:
            cells = [str(r["step"])] + [repr(float(r[c]))
                                        for c in TRACE_COLUMNS[1:]]
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# dataset checking


def convert_check(paths, fmt: str = "portable", merge_polarity: bool = True):
    """Validate event files or dataset directories; returns (path, ok, note)."""
    results = []
    for path in paths:
        try:
            if os.path.isdir(path):
                samples = load_dataset_dir(path, fmt=fmt,
                                           merge_polarity=merge_polarity)
                events = sum(s.stream.num_events for s in samples)
                note = (f"{len(samples)} samples, {events} events, "
                        f"{samples[0].stream.num_units} units")
            else:
                with open(path, "rb") as fh:
                    raw = fh.read()
                if fmt == "portable":
                    stream = data_mod.parse_portable(raw)
                else:
                    stream = data_mod.parse_aer(raw, merge_polarity=merge_polarity)
                note = (f"{stream.num_events} events, "
                        f"{stream.num_units} units")
            results.append((path, True, note))
        except (EngineError, OSError) as exc:
            results.append((path, False, str(exc)))
    return results
