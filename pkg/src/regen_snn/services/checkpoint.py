"""
Checkpoint files - versioned binary snapshot of a network and its config.

Byte layout (integers little-endian):
    magic      8 bytes  b"RGSNNCK\\0"
    version    u32      1
    topo_len   u32, then the topology string (UTF-8)
    cfg_len    u32, then the config JSON snapshot (UTF-8)
    cursor     u32 layers_trained, u32 readout_trained (0 or 1)
    n_stacks   u32, then per conv layer in topology order:
               u32 out, u32 in, u32 kh, u32 kw, out*in*kh*kw float64
    readout    u32 rows, u32 cols, rows*cols float64
    digest     32 bytes, SHA-256 of every byte above

A conv layer that was never initialized is stored with zero dimensions.
"""
import hashlib
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from ..engine.errors import (
    CheckpointCorruptError,
    CheckpointIOError,
    CheckpointVersionError,
    ShapeError,
    TopologyError,
    UntrainedLayerError,
)
from ..engine.layers import parse_topology
from ..engine.models import NetworkTopology

logger = logging.getLogger(__name__)

MAGIC = b"RGSNNCK\0"
VERSION = 1
DIGEST_SIZE = 32
_F64 = np.dtype("<f8")


@dataclass
class Checkpoint:
    """A topology with its weights, the config snapshot and training progress."""
    topology: NetworkTopology
    config_json: str = "{}"
    layers_trained: int = 0
    readout_trained: bool = False

    @property
    def conv_layers(self) -> int:
        return len(self.topology.conv_indices)

    def require_layers(self, count: int):
        if self.layers_trained < count:
            raise UntrainedLayerError(
                f"checkpoint has {self.layers_trained} trained conv layer(s), {count} needed"
            )


def _pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    """Serialize to the documented byte layout (digest included)."""
    topology = checkpoint.topology
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _pack_str(topology.spec),
        _pack_str(checkpoint.config_json),
        struct.pack("<II", checkpoint.layers_trained, int(checkpoint.readout_trained)),
        struct.pack("<I", len(topology.conv_indices)),
    ]
    for index in topology.conv_indices:
        weights = topology.stacks[index].weights
        dims = weights.shape if weights.ndim == 4 else (0, 0, 0, 0)
        parts.append(struct.pack("<IIII", *dims))
        parts.append(np.ascontiguousarray(weights, dtype=_F64).tobytes())
    readout = topology.readout if topology.readout.ndim == 2 else np.zeros((0, 0))
    parts.append(struct.pack("<II", *readout.shape))
    parts.append(np.ascontiguousarray(readout, dtype=_F64).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointCorruptError(f"checkpoint truncated at byte {self.pos} (needs {n} more)")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{count}I", self.take(4 * count))

    def text(self) -> str:
        (length,) = self.u32()
        try:
            return self.take(length).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointCorruptError(f"checkpoint string is not UTF-8: {exc}") from exc

    def floats(self, shape: tuple[int, ...]) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype=_F64).astype(np.float64).reshape(shape)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    """Parse and verify checkpoint bytes."""
    if len(raw) < len(MAGIC) + 4 + DIGEST_SIZE:
        raise CheckpointCorruptError(f"checkpoint of {len(raw)} bytes is too short")
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[len(MAGIC):len(MAGIC) + 4])
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads version {VERSION}")

    body, digest = raw[:-DIGEST_SIZE], raw[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointCorruptError("checkpoint digest mismatch (truncated or modified)")

    reader = _Reader(body)
    reader.take(len(MAGIC) + 4)
    spec = reader.text()
    config_json = reader.text()
    layers_trained, readout_trained = reader.u32(2)

    try:
        topology = parse_topology(spec)
    except TopologyError as exc:
        raise CheckpointCorruptError(f"checkpoint topology '{spec}' does not parse: {exc}") from exc

    (n_stacks,) = reader.u32()
    if n_stacks != len(topology.conv_indices):
        raise CheckpointCorruptError(f"checkpoint holds {n_stacks} stacks, topology has {len(topology.conv_indices)}")
    for index in topology.conv_indices:
        dims = reader.u32(4)
        stack = topology.stacks[index]
        if any(dims) and dims != (stack.out_maps, stack.in_maps, stack.kh, stack.kw):
            raise CheckpointCorruptError(f"stack {index} dims {dims} do not match topology")
        if any(dims):
            stack.weights = reader.floats(dims)
    rows, cols = reader.u32(2)
    if rows or cols:
        if (rows, cols) != (topology.classes, topology.feature_length):
            raise CheckpointCorruptError(f"readout {rows}x{cols} does not match topology")
        topology.readout = reader.floats((rows, cols))
    if reader.pos != len(body):
        raise CheckpointCorruptError(f"{len(body) - reader.pos} unexpected bytes before the digest")
    if layers_trained > len(topology.conv_indices) or readout_trained > 1:
        raise CheckpointCorruptError("training cursor out of range")

    return Checkpoint(
        topology=topology,
        config_json=config_json,
        layers_trained=layers_trained,
        readout_trained=bool(readout_trained),
    )


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """Write a checkpoint atomically (temp file then rename)."""
    path = Path(path)
    for index in checkpoint.topology.conv_indices:
        weights = checkpoint.topology.stacks[index].weights
        if weights.size and not np.all(np.isfinite(weights)):
            logger.warning("Saving non-finite weights for layer %d", index)
    payload = encode_checkpoint(checkpoint)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_bytes(payload)
        tmp.replace(path)
    except OSError as exc:
        raise CheckpointIOError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info("Saved checkpoint %s (%d bytes, %d layer(s) trained)", path, len(payload), checkpoint.layers_trained)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointIOError(f"cannot read checkpoint {path}: {exc}") from exc
    checkpoint = decode_checkpoint(raw)
    logger.info("Loaded checkpoint %s (%s)", path, checkpoint.topology.spec)
    return checkpoint


def weights_digest(topology: NetworkTopology) -> str:
    """SHA-256 over all conv weights in topology order, for freeze checks."""
    h = hashlib.sha256()
    for index in topology.conv_indices:
        weights = topology.stacks[index].weights
        if weights.ndim != 4:
            raise ShapeError(f"stack {index} has no weights")
        h.update(np.ascontiguousarray(weights, dtype=_F64).tobytes())
    return h.hexdigest()
