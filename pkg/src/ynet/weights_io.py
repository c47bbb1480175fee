"""``.ynw`` checkpoint files and encoder weight transfer.

Layout (all integers little-endian)::

    b"YNW1"                    magic
    u32 version                currently 1
    u32 entry_count
    entry_count x:
        u16 name_len, name (utf-8)
        u8  dtype tag          0 = float32
        u8  ndim, u32 dims[ndim]
        float32 data[prod(dims)]
    u32 crc32                  over every preceding byte
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
import zlib
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"YNW1"
VERSION = 1
DTYPE_F32 = 0
SUFFIX = ".ynw"
IGNORED_PREFIXES = ("classifier.",)


class CheckpointError(Exception):
    """Base class for checkpoint problems."""


class CRCError(CheckpointError):
    """Payload damaged or truncated."""


class VersionError(CheckpointError):
    """File written by an unsupported format version."""


class CheckpointShapeError(CheckpointError):
    """Entry shapes or coverage disagree with the expected model."""


class FormatError(CheckpointError):
    """Not a checkpoint file."""


def encode_checkpoint(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 16:
        raise CRCError(f"checkpoint truncated to {len(blob)} bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        hint = "" if body[:4] == MAGIC else " (YNW1 magic also missing)"
        raise CRCError(f"CRC32 mismatch; checkpoint is corrupted or truncated{hint}")
    if body[:4] != MAGIC:
        raise FormatError("missing YNW1 magic; not a checkpoint file")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    off = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode("utf-8")
            off += nlen
            tag, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            if tag != DTYPE_F32:
                raise FormatError(f"{name}: unknown dtype tag {tag}")
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4
            if off + nbytes > len(body):
                raise FormatError(f"{name}: data runs past end of payload")
            entries[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape).astype(np.float32)
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"malformed entry table: {exc}") from exc
    if off != len(body):
        raise FormatError(f"{len(body) - off} trailing bytes after last entry")
    return entries


def _entries_of(obj) -> Mapping[str, np.ndarray]:
    if hasattr(obj, "state_dict"):
        return obj.state_dict()
    if hasattr(obj, "params"):
        return OrderedDict((k, t.data) for k, t in obj.params.items())
    if hasattr(obj, "parameters"):
        return OrderedDict((k, t.data) for k, t in obj.parameters().items())
    return OrderedDict((k, getattr(v, "data", v)) for k, v in obj.items())


def save_checkpoint(obj, path: Union[str, Path]) -> int:
    """Write a model, encoder, or name->array mapping atomically.

    Returns the number of bytes written.
    """
    path = Path(path)
    blob = encode_checkpoint(_entries_of(obj))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"could not write checkpoint {path}: {exc}") from exc
    return len(blob)


def load_checkpoint(
    path: Union[str, Path], expected_shapes: Optional[Mapping[str, tuple[int, ...]]] = None
) -> "OrderedDict[str, np.ndarray]":
    """Read and verify a checkpoint.

    When ``expected_shapes`` is given, every expected entry must be present
    with the same shape; the first offending name is reported.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"could not read checkpoint {path}: {exc}") from exc
    entries = decode_checkpoint(blob)
    if expected_shapes is not None:
        check_shapes(entries, expected_shapes)
    return entries


def check_shapes(entries: Mapping[str, np.ndarray], expected: Mapping[str, tuple[int, ...]]) -> None:
    for name, shape in expected.items():
        if name not in entries:
            raise CheckpointShapeError(f"{name}: missing from checkpoint")
        if tuple(entries[name].shape) != tuple(shape):
            raise CheckpointShapeError(
                f"{name}: checkpoint shape {list(entries[name].shape)} vs expected {list(shape)}"
            )


def load_encoder_weights(encoder, weights: Mapping[str, np.ndarray]) -> None:
    """Copy conv weights into an encoder; classifier entries are skipped."""
    own = encoder.params
    relevant = OrderedDict()
    for name, value in weights.items():
        if name.startswith(IGNORED_PREFIXES):
            logger.info("skipping truncated classifier entry %s", name)
            continue
        relevant[name] = getattr(value, "data", value)
    missing = [k for k in own if k not in relevant]
    if missing:
        raise CheckpointShapeError(f"checkpoint covers only part of the encoder; first missing layer {missing[0]}")
    unknown = [k for k in relevant if k not in own]
    if unknown:
        raise CheckpointShapeError(f"checkpoint has layers the encoder lacks; first is {unknown[0]}")
    check_shapes(relevant, {k: t.shape for k, t in own.items()})
    for name, t in own.items():
        t.data = np.array(relevant[name], dtype=np.float32)


def transfer_encoder(checkpoint, model, target: str = "encoder1"):
    """Load an encoder checkpoint (path or mapping) into ``model.components[target]``.

    Entry names may be bare (``block1.conv1.weight``) or carry the target
    prefix. Other components and the parameter-group tags are untouched.
    """
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    prefix = f"{target}."
    weights = OrderedDict(
        (k[len(prefix):] if k.startswith(prefix) else k, v) for k, v in checkpoint.items()
    )
    load_encoder_weights(model.components[target], weights)
    model.pretrained_loaded = True
    return model
