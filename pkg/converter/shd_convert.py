"""Convert spiking-audio HDF5 archives to portable event files.

Reads the public SHD archive layout: ragged per-sample spike times in
seconds under ``spikes/times``, matching channel indices under
``spikes/units``, and integer labels under ``labels``.  Each sample becomes
one MAPEVT1 container (u32 channel, u32 microsecond timestamp, u8 polarity,
little-endian, sorted by time) and the output directory gets a
``manifest.csv`` with ``filename,label`` rows, which is exactly what the
training engine's directory loader expects.

Polarity is always 0: the audio channels carry no ON/OFF distinction.
"""

import argparse
import struct
import sys
from pathlib import Path

import h5py
import numpy as np

MAGIC = b"MAPEVT1"
VERSION = 1
NUM_CHANNELS = 700
_HEADER = struct.Struct("<IQ")
_EVENT = np.dtype([("unit", "<u4"), ("ts", "<u4"), ("pol", "u1")])
_REQUIRED = ("spikes/times", "spikes/units", "labels")


class ConvertError(Exception):
    """Archive contents violate the expected layout or ranges."""


def sample_to_bytes(times_s, channels) -> bytes:
    """Encode one sample's ragged (seconds, channel) arrays as MAPEVT1.

    Times are quantized to whole microseconds by floor; sub-microsecond
    precision is irrelevant at millisecond step lengths.  Events are sorted
    by quantized time with a stable sort, so same-microsecond events keep
    their archive order.
    """
    times = np.asarray(times_s, dtype=np.float64)
    chans = np.asarray(channels, dtype=np.int64)
    if times.shape != chans.shape or times.ndim != 1:
        raise ConvertError(
            f"times/channels shape mismatch: {times.shape} vs {chans.shape}")
    if times.size and float(times.min()) < 0.0:
        raise ConvertError("negative spike time")
    if np.any((chans < 0) | (chans >= NUM_CHANNELS)):
        bad = int(chans[(chans < 0) | (chans >= NUM_CHANNELS)][0])
        raise ConvertError(f"channel {bad} out of range [0, {NUM_CHANNELS})")
    ts = np.floor(times * 1e6).astype(np.int64)
    if ts.size and int(ts.max()) > 0xFFFFFFFF:
        raise ConvertError("timestamp overflows 32-bit microseconds")
    order = np.argsort(ts, kind="stable")
    rec = np.empty(ts.size, dtype=_EVENT)
    rec["unit"] = chans[order]
    rec["ts"] = ts[order]
    rec["pol"] = 0
    return (MAGIC + bytes([VERSION]) + _HEADER.pack(NUM_CHANNELS, ts.size)
            + rec.tobytes())


def convert(input_path, output_dir) -> int:
    """Write one event file per archive sample plus a manifest; returns the
    sample count."""
    out = Path(output_dir)
    with h5py.File(input_path, "r") as archive:
        missing = [key for key in _REQUIRED if key not in archive]
        if missing:
            raise ConvertError(f"archive missing dataset(s): {', '.join(missing)}")
        times = archive["spikes/times"]
        chans = archive["spikes/units"]
        labels = archive["labels"][...]
        if not (len(times) == len(chans) == len(labels)):
            raise ConvertError(
                f"sample count mismatch: {len(times)} times, "
                f"{len(chans)} channel rows, {len(labels)} labels")
        out.mkdir(parents=True, exist_ok=True)
        rows = []
        for i in range(len(labels)):
            name = f"sample_{i:05d}.evt"
            (out / name).write_bytes(sample_to_bytes(times[i], chans[i]))
            rows.append((name, int(labels[i])))
    with open(out / "manifest.csv", "w", newline="") as fh:
        fh.write("filename,label\n")
        for name, label in rows:
            fh.write(f"{name},{label}\n")
    return len(rows)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="convert-shd",
        description="Convert a spiking-audio HDF5 archive to a directory of "
                    "portable event files plus a manifest.csv.")
    parser.add_argument("input", help="HDF5 archive path")
    parser.add_argument("output_dir", help="directory for event files")
    args = parser.parse_args(argv)
    try:
        count = convert(args.input, args.output_dir)
    except (ConvertError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {count} samples to {args.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
