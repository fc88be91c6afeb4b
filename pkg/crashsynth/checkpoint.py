"""
Versioned named-tensor container shared by the VAE and diffusion checkpoints.

Layout (little-endian)::

    b"CSYNCKPT"                      magic
    u32                              format version
    u32 n, n bytes                   UTF-8 JSON header (sorted keys)
    u32                              record count
    per record:
        u32 n, n bytes               UTF-8 tensor name
        u32                          ndim
        u64 * ndim                   shape
        float64 * prod(shape)        values, C order

The header carries ``kind``, the fitted ``schema``, its ``fingerprint``, the
training ``config`` and free-form ``extras``.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from .config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .data_schema import TableSchema
from .errors import ArtifactError, SchemaError

log = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    kind: str
    header: Dict[str, Any]
    tensors: Dict[str, np.ndarray] = field(repr=False)

    @property
    def schema(self) -> TableSchema:
        return TableSchema.from_dict(self.header["schema"])

    @property
    def fingerprint(self) -> str:
        return self.header["fingerprint"]

    @property
    def config(self) -> Dict[str, Any]:
        return self.header.get("config", {})

    @property
    def extras(self) -> Dict[str, Any]:
        return self.header.get("extras", {})

    def require_schema(self, schema: TableSchema) -> None:
        """
        Refuse a checkpoint trained against a different schema.

        Raises:
            SchemaError: If the fingerprints differ
        """
        if schema.fingerprint() != self.fingerprint:
            raise SchemaError(
                f"Checkpoint {self.kind!r} was trained on schema {self.fingerprint[:12]}, "
                f"data has schema {schema.fingerprint()[:12]}"
            )


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def write_checkpoint(path: Path, kind: str, schema: TableSchema, tensors: Dict[str, np.ndarray],
                     config: Optional[Dict[str, Any]] = None, extras: Optional[Dict[str, Any]] = None) -> Path:
    """
    Serialize named tensors with their header.

    Args:
        path: Output file
        kind: Model kind, e.g. ``"vae"`` or ``"diffusion"``
        schema: Fitted schema the model was trained on
        tensors: Name to array mapping, written in insertion order
        config: Training configuration
        extras: Additional JSON-serializable values

    Returns:
        The written path
    """
    header = {
        "kind": kind,
        "schema": schema.to_dict(),
        "fingerprint": schema.fingerprint(),
        "config": config or {},
        "extras": extras or {},
    }
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              _pack_text(json.dumps(header, sort_keys=True)), struct.pack("<I", len(tensors))]
    for name, values in tensors.items():
        values = np.ascontiguousarray(values, dtype="<f8")
        chunks.append(_pack_text(name))
        chunks.append(struct.pack("<I", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}Q", *values.shape))
        chunks.append(values.tobytes(order="C"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    log.info("Wrote %s checkpoint with %d tensors to %s", kind, len(tensors), path)
    return path


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ArtifactError(f"Checkpoint '{self.path}' is truncated")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (size,) = self.unpack("<I")
        return self.take(size).decode("utf-8")


def read_checkpoint(path: Path, expected_kind: Optional[str] = None) -> Checkpoint:
    """
    Parse a checkpoint file.

    Args:
        path: File written by :func:`write_checkpoint`
        expected_kind: When given, the header kind must match

    Raises:
        ArtifactError: Missing file, wrong magic, unsupported version, truncation or wrong kind
    """
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"Checkpoint '{path}' does not exist")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ArtifactError(f"'{path}' is not a crashsynth checkpoint")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise ArtifactError(f"Checkpoint '{path}' has format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(reader.text())
    except json.JSONDecodeError as e:
        raise ArtifactError(f"Checkpoint '{path}' has a corrupt header: {e}") from e
    kind = header.get("kind", "")
    if expected_kind is not None and kind != expected_kind:
        raise ArtifactError(f"Checkpoint '{path}' holds a {kind!r} model, expected {expected_kind!r}")
    (count,) = reader.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = reader.text()
        (ndim,) = reader.unpack("<I")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        n_values = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(reader.take(8 * n_values), dtype="<f8").reshape(shape).astype(np.float64)
    return Checkpoint(kind, header, tensors)
