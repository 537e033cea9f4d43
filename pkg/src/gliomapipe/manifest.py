"""Stage manifests and atomic file writes.

A manifest records what a stage consumed and produced by SHA-256, so the
output checksums of one stage reappear as the input checksums of the next.
The wall-clock timestamp sits outside the hashed ``payload``.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import platform
from importlib import metadata
from pathlib import Path

from .errors import StageDependencyError


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_path(path) -> str:
    """Checksum of a file, or of a directory as the hash of its sorted (relative path, file hash) list."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for child in sorted(p for p in path.rglob("*") if p.is_file()):
        h.update(str(child.relative_to(path)).encode())
        h.update(sha256_file(child).encode())
    return h.hexdigest()


def require(*paths) -> None:
    for p in paths:
        if p is None or not Path(p).exists():
            raise StageDependencyError(p)


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode())


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("gliomapipe", "artifact", "numpy", "scipy", "torch", "nibabel"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            pass
    return out


def write_manifest(path, stage: str, config_digest: str, seed: int, inputs: dict, outputs: dict,
                   extra: dict | None = None, timing: dict | None = None) -> dict:
    payload = {
        "stage": stage,
        "config_sha256": config_digest,
        "seed": seed,
        "versions": _versions(),
        "inputs": {k: sha256_path(v) for k, v in sorted(inputs.items())},
        "outputs": {k: sha256_path(v) for k, v in sorted(outputs.items())},
        "extra": extra or {},
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    doc = {
        "payload": payload,
        "payload_sha256": hashlib.sha256(blob).hexdigest(),
        "unhashed": {
            "written_at": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
            **(timing or {}),
        },
    }
    write_json(path, doc)
    return doc


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
