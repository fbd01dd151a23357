"""Single-file checkpoints: one JSON header line, then little-endian float64 payloads."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    names = sorted(arrays)
    entries = []
    offset = 0
    payload = []
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        raw = a.tobytes()
        payload.append(raw)
        offset += len(raw)
    header = {"version": CHECKPOINT_VERSION, "tensors": entries, "metadata": metadata or {}}
    with Path(path).open("wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for raw in payload:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header line")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {header.get('version')!r} != {CHECKPOINT_VERSION}")
    body = blob[nl + 1:]
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start, stop = e["offset"], e["offset"] + 8 * count
        if stop > len(body):
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arrays[e["name"]] = np.frombuffer(body[start:stop], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return arrays, header.get("metadata", {})


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
