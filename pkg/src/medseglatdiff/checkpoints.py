"""Versioned checkpoint bundles with an integrity hash.

A checkpoint is a single file holding a serialized payload plus the sha256
of those bytes; loading verifies the hash before deserializing. Noise
schedules are persisted as their four defining scalars, never as arrays.
"""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch

CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, kind: str, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    torch.save({
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "payload": blob,
    }, path)


def load_checkpoint(path, expected_kind: str | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        wrapper = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint: {exc}") from exc
    for key in ("version", "kind", "sha256", "payload"):
        if key not in wrapper:
            raise CheckpointError(f"{path}: malformed checkpoint (missing {key!r})")
    if wrapper["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {wrapper['version']}")
    if expected_kind is not None and wrapper["kind"] != expected_kind:
        raise CheckpointError(f"{path}: expected kind {expected_kind!r}, found {wrapper['kind']!r}")
    digest = hashlib.sha256(wrapper["payload"]).hexdigest()
    if digest != wrapper["sha256"]:
        raise CheckpointError(f"{path}: integrity hash mismatch")
    return torch.load(io.BytesIO(wrapper["payload"]), map_location="cpu", weights_only=False)
