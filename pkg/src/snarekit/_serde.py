"""Serialization helpers: bit-exact array codecs, canonical JSON, seeded substreams.

All on-disk floats travel as base64-encoded little-endian float64 bytes so that
save/load round-trips are bit-exact regardless of locale or repr changes.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
import zlib

import numpy as np


def encode_array(arr: np.ndarray) -> dict:
    a = np.ascontiguousarray(arr, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    arr = np.frombuffer(raw, dtype="<f8").reshape(obj["shape"])
    return arr.astype(np.float64, copy=True)


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, fixed separators, no trailing space."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, obj) -> None:
    atomic_write_text(path, canonical_json(obj))


def read_json(path: str):
    with open(path, "r") as fh:
        return json.load(fh)


def substream(seed: int, name: str) -> np.random.Generator:
    """Named deterministic RNG substream derived from one run seed."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(tag,)))
