"""Versioned binary checkpoints: magic, version, JSON header, length-prefixed float64 arrays"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

from .exceptions import DataError

logger = logging.getLogger(__name__)

MAGIC = b"FLCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """
    Everything needed to resume or reuse a model.

    Array names are namespaced: `model/...`, `disc/...`, `opt/...`,
    `disc_opt/...`.
    """

    model_id: str
    arrays: Dict[str, np.ndarray]
    step: int = 0
    config_digest: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def section(self, prefix: str) -> Dict[str, np.ndarray]:
        """Arrays under `prefix/`, with the prefix stripped."""
        head = prefix + "/"
        return {name[len(head):]: arr for name, arr in self.arrays.items() if name.startswith(head)}

    def to_bytes(self) -> bytes:
        header = json.dumps(
            {"model_id": self.model_id, "step": self.step,
             "config_digest": self.config_digest, "metadata": self.metadata},
            sort_keys=True, separators=(",", ":"),
        ).encode("utf-8")
        chunks = [MAGIC, struct.pack("<I", self.version), struct.pack("<I", len(header)), header,
                  struct.pack("<I", len(self.arrays))]
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            chunks.append(arr.tobytes(order="C"))
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:4] != MAGIC:
            raise DataError("not a checkpoint file (bad magic bytes)")
        offset = 4

        def take(fmt: str):
            nonlocal offset
            size = struct.calcsize(fmt)
            if offset + size > len(blob):
                raise DataError("truncated checkpoint")
            values = struct.unpack_from(fmt, blob, offset)
            offset += size
            return values

        def take_bytes(size: int) -> bytes:
            nonlocal offset
            if offset + size > len(blob):
                raise DataError("truncated checkpoint")
            chunk = blob[offset:offset + size]
            offset += size
            return chunk

        (version,) = take("<I")
        if version != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
        (header_len,) = take("<I")
        header = json.loads(take_bytes(header_len).decode("utf-8"))
        (count,) = take("<I")
        arrays = {}
        for _ in range(count):
            (name_len,) = take("<I")
            name = take_bytes(name_len).decode("utf-8")
            (ndim,) = take("<I")
            shape = take(f"<{ndim}Q") if ndim else ()
            n_values = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(take_bytes(8 * n_values), dtype="<f8")
            arrays[name] = data.astype(np.float64).reshape(shape)
        return cls(model_id=header["model_id"], arrays=arrays, step=header["step"],
                   config_digest=header["config_digest"], metadata=header["metadata"], version=version)


def save_checkpoint(checkpoint: Checkpoint, path: str) -> str:
    """Write atomically (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(checkpoint.to_bytes())
    os.replace(tmp, path)
    logger.info(f"Checkpoint written: {path} (step {checkpoint.step})")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return Checkpoint.from_bytes(f.read())


def config_digest(config_dict: Dict[str, Any]) -> str:
    """sha256 of the canonical JSON form of a configuration."""
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
