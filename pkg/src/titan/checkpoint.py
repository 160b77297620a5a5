"""Binary checkpoint container.

Layout: magic ``b"TITN"``, little-endian u32 version, little-endian u64 header
length, UTF-8 JSON header, then each parameter as raw little-endian float64 in
the order listed in ``header["params"]``.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import VersionError
from .model import ModelSpec, TitanModel

MAGIC = b"TITN"
VERSION = 1


def encode(model: TitanModel, extra: dict | None = None) -> bytes:
    named = list(model.named_parameters())
    header = {
        "format": "TITN",
        "version": VERSION,
        "model": model.spec.to_dict(),
        "params": [{"name": n, "shape": list(p.shape)} for n, p in named],
        **(extra or {}),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    blobs = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for _, p in named)
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + blobs


def save(path, model: TitanModel, extra: dict | None = None) -> None:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    data = encode(model, extra)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < 16 or data[:4] != MAGIC:
        raise VersionError("not a TITN checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise VersionError(f"corrupt checkpoint header: {exc}") from exc
    return header, 16 + hlen


def load_into(model: TitanModel, data: bytes) -> dict:
    """Copy parameters from ``data`` into ``model``; shapes and names must match."""
    header, offset = read_header(data)
    named = list(model.named_parameters())
    entries = header["params"]
    if len(entries) != len(named):
        raise VersionError(f"checkpoint has {len(entries)} parameters, model has {len(named)}")
    for entry, (name, p) in zip(entries, named):
        if entry["name"] != name:
            raise VersionError(f"parameter order mismatch: checkpoint {entry['name']!r} vs model {name!r}")
        if tuple(entry["shape"]) != p.shape:
            raise VersionError(f"shape mismatch for {name}: checkpoint {tuple(entry['shape'])} vs model {p.shape}")
        nbytes = 8 * p.size
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise VersionError(f"checkpoint truncated while reading {name}")
        p.data[...] = np.frombuffer(chunk, dtype="<f8").reshape(p.shape)
        offset += nbytes
    if offset != len(data):
        raise VersionError(f"checkpoint has {len(data) - offset} trailing bytes")
    return header


def load(path, spec_overrides: dict | None = None) -> tuple[TitanModel, dict]:
    data = Path(path).read_bytes()
    header, _ = read_header(data)
    fields = dict(header["model"])
    if spec_overrides:
        for key, value in spec_overrides.items():
            if key in fields and fields[key] != value:
                raise VersionError(f"config field {key!r}: checkpoint has {fields[key]!r}, run expects {value!r}")
    try:
        spec = ModelSpec(**fields)
    except TypeError as exc:
        raise VersionError(f"checkpoint model header: {exc}") from exc
    model = TitanModel(spec, np.random.default_rng(0))
    load_into(model, data)
    return model, header
