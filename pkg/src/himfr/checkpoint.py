"""Versioned checkpoint containers and the model registry.

Container layout::

    <MAGIC> SP v<version> LF
    <header JSON> LF            stage, version, config echo, payload size and SHA-256
    <payload>                   torch-serialized dict of tensors
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import torch

from .errors import CheckpointError

FORMAT_VERSION = 1
MAGIC = {
    "detector": "HIMFR-DET",
    "inpainter": "HIMFR-INP",
    "recognizer": "HIMFR-REC",
}


def magic_line(stage: str) -> bytes:
    return f"{MAGIC[stage]} v{FORMAT_VERSION}\n".encode()


def save_container(path, stage: str, config: dict, tensors: dict[str, torch.Tensor]) -> str:
    """Write a container and return the payload SHA-256."""
    if stage not in MAGIC:
        raise ValueError(f"unknown stage {stage!r}")
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu().contiguous() for k, v in tensors.items()}, buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).hexdigest()
    header = {
        "stage": stage,
        "version": FORMAT_VERSION,
        "config": config,
        "payload_bytes": len(payload),
        "payload_sha256": digest,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(magic_line(stage))
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(payload)
    tmp.replace(path)
    return digest


@dataclass
class Container:
    stage: str
    config: dict
    tensors: dict[str, torch.Tensor]
    sha256: str


def read_header(path) -> tuple[str, dict, bytes]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    first, sep, rest = raw.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: not a checkpoint container")
    try:
        name, version = first.decode().split(" ")
    except (UnicodeDecodeError, ValueError):
        raise CheckpointError(f"{path}: not a checkpoint container") from None
    stage = {v: k for k, v in MAGIC.items()}.get(name)
    if stage is None:
        raise CheckpointError(f"{path}: unknown container magic {name!r}")
    if version != f"v{FORMAT_VERSION}":
        raise CheckpointError(f"{path}: unsupported container version {version}")
    head, sep, payload = rest.partition(b"\n")
    if not sep:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(head)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    return stage, header, payload


def load_container(path, stage: str) -> Container:
    found, header, payload = read_header(path)
    if found != stage:
        raise CheckpointError(f"{path}: expected a {stage} checkpoint, found {found}")
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {header.get('payload_bytes')} bytes)")
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header.get("payload_sha256"):
        raise CheckpointError(f"{path}: payload hash mismatch")
    try:
        tensors = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot decode payload: {exc}") from exc
    return Container(stage, header["config"], tensors, digest)


class ModelRegistry:
    """Stage name -> checkpoint metadata, persisted as JSON next to the checkpoints."""

    def __init__(self, path):
        self.path = Path(path)
        self.entries: dict[str, dict] = {}
        if self.path.is_file():
            self.entries = json.loads(self.path.read_text())

    def register(self, stage: str, checkpoint_path) -> dict:
        found, header, _ = read_header(checkpoint_path)
        if found != stage:
            raise CheckpointError(f"{checkpoint_path}: expected a {stage} checkpoint, found {found}")
        entry = {
            "path": str(checkpoint_path),
            "version": header["version"],
            "config": header["config"],
            "sha256": header["payload_sha256"],
        }
        self.entries[stage] = entry
        self.save()
        return entry

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.entries, indent=2, sort_keys=True) + "\n")

    def verify(self, stage: str) -> Container:
        """Load the registered checkpoint, checking its recomputed hash against the registry."""
        if stage not in self.entries:
            raise CheckpointError(f"no {stage} checkpoint registered in {self.path}")
        entry = self.entries[stage]
        container = load_container(entry["path"], stage)
        if container.sha256 != entry["sha256"]:
            raise CheckpointError(f"{entry['path']}: hash differs from registry entry")
        if entry["version"] != FORMAT_VERSION:
            raise CheckpointError(f"{entry['path']}: registry records incompatible version {entry['version']}")
        return container
