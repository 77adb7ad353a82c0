"""Output files: CSV tables, BNRD snapshot containers and run manifests.

Floats are written with ``repr`` so that identical computations give
byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct

import numpy as np

from .spectral_core import KIND_SNAPSHOTS, MAGIC, VERSION


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


class CsvSink:
    """CSV writer that flushes after every row, so partial runs keep their data."""

    def __init__(self, path, header):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh, lineterminator="\n")
        self._w.writerow(header)
        self._fh.flush()

    def row(self, values):
        self._w.writerow([_fmt(v) for v in values])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path, header, rows):
    with CsvSink(path, header) as sink:
        for r in rows:
            sink.row(r)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def save_snapshots(path, times, states):
    """BNRD kind 2: magic, u32 version, u32 kind, u64 n_records, u64 n_coeffs,
    then n_records blocks of f64 t followed by n_coeffs f64 coefficients."""
    times = np.asarray(times, dtype="<f8")
    states = np.asarray(states, dtype="<f8").reshape(times.size, -1)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, KIND_SNAPSHOTS))
        fh.write(struct.pack("<QQ", times.size, states.shape[1]))
        block = np.concatenate([times[:, None], states], axis=1)
        fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def load_snapshots(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a BNRD file")
        version, kind = struct.unpack("<II", fh.read(8))
        if version != VERSION or kind != KIND_SNAPSHOTS:
            raise ValueError(f"{path}: unsupported version/kind {version}/{kind}")
        n_rec, n_coef = struct.unpack("<QQ", fh.read(16))
        data = np.frombuffer(fh.read(8 * n_rec * (n_coef + 1)), dtype="<f8")
    data = data.reshape(n_rec, n_coef + 1)
    return data[:, 0].copy(), data[:, 1:].copy()


def content_hash(*chunks):
    h = hashlib.sha256()
    for c in chunks:
        h.update(c if isinstance(c, bytes) else str(c).encode())
    return h.hexdigest()


def write_manifest(out_dir, command, config_text, seed, extra=()):
    """Manifest written before any computation: command, seed, input hash, config echo."""
    from . import __version__

    os.makedirs(out_dir, exist_ok=True)
    lines = [
        f"command = {command}",
        f"seed = {seed}",
        f"package_version = {__version__}",
        f"input_sha256 = {content_hash(command, seed, config_text)}",
    ]
    lines += [f"{k} = {v}" for k, v in extra]
    lines += ["", "[config]", config_text.rstrip(), ""]
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines))


def write_status(out_dir, status, detail=""):
    with open(os.path.join(out_dir, "status.txt"), "w") as fh:
        fh.write(status + ("\n" + detail if detail else "") + "\n")
