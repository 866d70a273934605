"""Event-stream input pipeline.

Spike data moves through three stages: raw sensor records or synthetic
generators produce an :class:`EventStream` (unit id, microsecond timestamp,
polarity per event); streams serialize to a small portable container
(``MAPEVT1``) for interchange; binning folds a stream onto the simulation
step grid as per-step counts (or their binary clamp for the single-spike
mode).  Everything is deterministic given the seeds.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

# vision-sensor digit recordings: 34 x 34 pixels, two polarities
SENSOR_SIDE = 34
SENSOR_UNITS = SENSOR_SIDE * SENSOR_SIDE

PORTABLE_MAGIC = b"MAPEVT1"
PORTABLE_VERSION = 1
_HEADER = struct.Struct("<IQ")          # num_units u32, num_events u64
_EVENT_DTYPE = np.dtype([("unit", "<u4"), ("ts", "<u4"), ("pol", "u1")])


@dataclass
class EventStream:
    """Sorted event record arrays plus the unit-space size.

    ``duration_us`` is advisory (generators set it exactly, parsers fall back
    to last timestamp + 1); binning trusts only the step grid it is given.
    """

    unit_ids: np.ndarray
    timestamps_us: np.ndarray
    polarities: np.ndarray
    num_units: int
    duration_us: int

    @property
    def num_events(self) -> int:
        return self.unit_ids.shape[0]


@dataclass
class LabeledStream:
    stream: EventStream
    label: int


def _sorted_stream(units, times, pols, num_units, duration_us) -> EventStream:
    order = np.argsort(times, kind="stable")  # stable: preserves record order per timestamp
    return EventStream(unit_ids=np.ascontiguousarray(units[order]),
                       timestamps_us=np.ascontiguousarray(times[order]),
                       polarities=np.ascontiguousarray(pols[order]),
                       num_units=num_units, duration_us=duration_us)


# ---------------------------------------------------------------------------
# sensor AER records


def parse_aer(raw: bytes, merge_polarity: bool = True) -> EventStream:
    """Decode 5-byte vision-sensor records.

    Layout per event: byte 0 x, byte 1 y, byte 2 bit 7 polarity, remaining 23
    bits of bytes 2..4 (big-endian) the microsecond timestamp.  Pixels map to
    units as ``y * 34 + x``; with ``merge_polarity`` both polarities share a
    unit, otherwise the second polarity gets its own bank of 1156 units.
    """
    if len(raw) % 5 != 0:
        raise DataFormatError(
            f"record stream length {len(raw)} is not a multiple of 5")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 5).astype(np.uint32)
    x, y = rec[:, 0], rec[:, 1]
    if np.any(x >= SENSOR_SIDE) or np.any(y >= SENSOR_SIDE):
        bad = int(np.argmax((x >= SENSOR_SIDE) | (y >= SENSOR_SIDE)))
        raise DataFormatError(
            f"event {bad}: pixel ({x[bad]}, {y[bad]}) outside the 34x34 sensor")
    pol = (rec[:, 2] >> 7).astype(np.uint8)
    ts = ((rec[:, 2] & 0x7F) << 16) | (rec[:, 3] << 8) | rec[:, 4]
    units = y * SENSOR_SIDE + x
    num_units = SENSOR_UNITS
    if not merge_polarity:
        units = units + SENSOR_UNITS * pol.astype(np.uint32)
        num_units = 2 * SENSOR_UNITS
    duration = int(ts.max()) + 1 if ts.size else 0
    return _sorted_stream(units, ts, pol, num_units, duration)


# ---------------------------------------------------------------------------
# portable container


def write_portable(stream: EventStream) -> bytes:
    """Serialize: magic, version byte, u32 unit count, u64 event count, then
    9 bytes per event (u32 unit, u32 microsecond timestamp, u8 polarity),
    little-endian, events in timestamp order."""
    if np.any(np.diff(stream.timestamps_us.astype(np.int64)) < 0):
        raise DataFormatError("events must be sorted by timestamp before writing")
    if stream.num_events and int(stream.unit_ids.max()) >= stream.num_units:
        raise DataFormatError("unit id out of declared range")
    rec = np.empty(stream.num_events, dtype=_EVENT_DTYPE)
    rec["unit"] = stream.unit_ids
    rec["ts"] = stream.timestamps_us
    rec["pol"] = stream.polarities
    return (PORTABLE_MAGIC + bytes([PORTABLE_VERSION])
            + _HEADER.pack(stream.num_units, stream.num_events)
            + rec.tobytes())


def parse_portable(data: bytes) -> EventStream:
    head = len(PORTABLE_MAGIC) + 1 + _HEADER.size
    if len(data) < head:
        raise DataFormatError(f"truncated header: {len(data)} bytes")
    if data[:len(PORTABLE_MAGIC)] != PORTABLE_MAGIC:
        raise DataFormatError("bad magic, not a portable event file")
    version = data[len(PORTABLE_MAGIC)]
    if version != PORTABLE_VERSION:
        raise DataFormatError(f"unsupported version {version}")
    num_units, num_events = _HEADER.unpack_from(data, len(PORTABLE_MAGIC) + 1)
    want = head + _EVENT_DTYPE.itemsize * num_events
    if len(data) != want:
        raise DataFormatError(
            f"size mismatch: header promises {want} bytes, got {len(data)}")
    rec = np.frombuffer(data, dtype=_EVENT_DTYPE, count=num_events, offset=head)
    units = rec["unit"].astype(np.uint32)
    ts = rec["ts"].astype(np.uint32)
    if np.any(np.diff(ts.astype(np.int64)) < 0):
        raise DataFormatError("events not sorted by timestamp")
    if num_events and int(units.max()) >= num_units:
        bad = int(np.argmax(units >= num_units))
        raise DataFormatError(
            f"event {bad}: unit {units[bad]} >= declared {num_units}")
    duration = int(ts[-1]) + 1 if num_events else 0
    return EventStream(unit_ids=units, timestamps_us=ts,
                       polarities=rec["pol"].copy(), num_units=num_units,
                       duration_us=duration)


# ---------------------------------------------------------------------------
# binning


@dataclass
class SpikeTensor:
    """Per-step spike counts [num_steps, num_units] on a fixed grid.

    ``dropped`` counts events beyond the grid's end; with ``binary`` the
    counts are clamped to {0, 1} for the single-spike input pattern.
    """

    counts: np.ndarray
    dt_ms: float
    binary: bool
    dropped: int


def bin_events(stream: EventStream, dt_ms: float, num_steps: int,
               binary: bool = False) -> SpikeTensor:
    """Fold events onto the step grid: event at t lands in step ``t // dt``.

    The grid covers ``[0, num_steps * dt)``; later events are dropped (and
    counted), never wrapped or clamped into the last step.
    """
    dt_us = int(round(dt_ms * 1000.0))
    if dt_us < 1:
        raise ConfigError(f"step of {dt_ms} ms is below timestamp resolution")
    bins = stream.timestamps_us // dt_us
    keep = bins < num_steps
    counts = np.zeros((num_steps, stream.num_units))
    np.add.at(counts, (bins[keep], stream.unit_ids[keep]), 1.0)
    if binary:
        counts = np.minimum(counts, 1.0)
    return SpikeTensor(counts=counts, dt_ms=dt_ms, binary=binary,
                       dropped=int(np.sum(~keep)))


def bin_split(samples, dt_ms: float, num_steps: int, binary: bool = False):
    """Bin a list of labeled streams into stacked arrays [N, T, L] and [N]."""
    tensors = [bin_events(ls.stream, dt_ms, num_steps, binary) for ls in samples]
    x = np.stack([t.counts for t in tensors])
    y = np.array([ls.label for ls in samples], dtype=int)
    return x, y


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass
class SyntheticTaskSpec:
    """Poisson-process classification tasks, deterministic given ``seed``.

    ``rate_pattern``: each class elevates one block of units from
    ``rate_low`` to ``rate_high`` (rates in events per ms, every unit always
    active).  ``temporal_order``: two classes, two unit groups, two time
    windows; the classes differ only in which group bursts first, with
    identical time-summed rates, so the label is invisible to any readout
    that ignores event order.
    """

    kind: str
    num_units: int = 32
    num_classes: int = 4
    duration_ms: float = 96.0
    samples_per_class: int = 96
    test_samples_per_class: int = 32
    rate_low: float = 0.05
    rate_high: float = 0.5
    seed: int = 0

    def validate(self):
        if self.kind not in ("rate_pattern", "temporal_order"):
            raise ConfigError(f"unknown synthetic task kind {self.kind!r}")
        if self.kind == "temporal_order" and self.num_classes != 2:
            raise ConfigError("temporal_order is a two-class task")
        if self.num_classes < 2 or self.num_units < self.num_classes:
            raise ConfigError("need at least 2 classes and one unit per class")
        if not 0.0 <= self.rate_low < self.rate_high:
            raise ConfigError("rates must satisfy 0 <= rate_low < rate_high")
        if self.duration_ms <= 0 or self.samples_per_class < 1:
            raise ConfigError("duration and sample counts must be positive")


def _window_rates(task: SyntheticTaskSpec, label: int):
    """Per-window, per-unit rates [W, L] in events/ms plus window bounds."""
    full = np.full(task.num_units, task.rate_low)
    if task.kind == "rate_pattern":
        rates = full.copy()
        block = np.array_split(np.arange(task.num_units), task.num_classes)[label]
        rates[block] = task.rate_high
        return rates[None, :], [(0.0, task.duration_ms)]
    # temporal_order: group A = first half units, B = second half
    half_u = task.num_units // 2
    half_t = task.duration_ms / 2.0
    first, second = full.copy(), full.copy()
    hot_first = slice(0, half_u) if label == 0 else slice(half_u, task.num_units)
    hot_second = slice(half_u, task.num_units) if label == 0 else slice(0, half_u)
    first[hot_first] = task.rate_high
    second[hot_second] = task.rate_high
    return np.stack([first, second]), [(0.0, half_t), (half_t, task.duration_ms)]


def _poisson_stream(rng: np.random.Generator, task: SyntheticTaskSpec,
                    label: int) -> EventStream:
    rates, windows = _window_rates(task, label)
    units, times = [], []
    for (t0_ms, t1_ms), window_rates in zip(windows, rates):
        lam = window_rates * (t1_ms - t0_ms)
        counts = rng.poisson(lam)
        total = int(np.sum(counts))
        units.append(np.repeat(np.arange(task.num_units, dtype=np.uint32), counts))
        times.append(rng.integers(int(t0_ms * 1000), int(t1_ms * 1000),
                                  size=total).astype(np.uint32))
    all_units = np.concatenate(units)
    all_times = np.concatenate(times)
    return _sorted_stream(all_units, all_times,
                          np.zeros(all_units.shape[0], dtype=np.uint8),
                          task.num_units, int(task.duration_ms * 1000))


def generate_synthetic(task: SyntheticTaskSpec):
    """Build (train, test) lists of labeled streams.

    Every sample gets its own child generator from a seed sequence, so a
    sample's content depends only on (task seed, split, class, index), not on
    how many other samples exist.
    """
    task.validate()
    splits = []
    for split_id, per_class in ((0, task.samples_per_class),
                                (1, task.test_samples_per_class)):
        samples = []
        for label in range(task.num_classes):
            ss = np.random.SeedSequence([task.seed, split_id, label])
            for child in ss.spawn(per_class):
                samples.append(LabeledStream(
                    stream=_poisson_stream(np.random.default_rng(child), task, label),
                    label=label))
        splits.append(samples)
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# dataset directories


def load_dataset_dir(path, fmt: str = "portable", merge_polarity: bool = True):
    """Read a directory of event files listed by its ``manifest.csv``.

    The manifest has a ``filename,label`` header row; files are portable
    containers or raw sensor records depending on ``fmt``.
    """
    root = Path(path)
    manifest = root / "manifest.csv"
    if not manifest.is_file():
        raise DataFormatError(f"no manifest.csv under {root}")
    samples = []
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["filename", "label"]:
            raise DataFormatError(
                f"manifest header {reader.fieldnames} != ['filename', 'label']")
        for row in reader:
            raw = (root / row["filename"]).read_bytes()
            if fmt == "portable":
                stream = parse_portable(raw)
            elif fmt == "aer":
                stream = parse_aer(raw, merge_polarity=merge_polarity)
            else:
                raise ConfigError(f"unknown dataset format {fmt!r}")
            samples.append(LabeledStream(stream=stream, label=int(row["label"])))
    if not samples:
        raise DataFormatError(f"manifest under {root} lists no samples")
    widths = {ls.stream.num_units for ls in samples}
    if len(widths) > 1:
        raise DataFormatError(f"inconsistent unit counts across files: {widths}")
    return samples
