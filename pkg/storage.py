"""
storage.py - Binary persistence for checkpoint stores and prepared splits

Checkpoint store layout (little-endian):
    b"TIAD" | version u32 | fingerprint 32 bytes | checkpoint count u64
    per checkpoint: epoch u64 | learning rate f64 | parameter count u64 | values f64...

Split layout (little-endian):
    b"TIAS" | version u32 | metadata length u64 | metadata (UTF-8 JSON, sorted keys)
    train matrix | val matrix (rows u64, cols u64, values f64...) | labels (count u64, u8...)

Files are written to a temporary sibling and renamed, so readers never see a
half-written file.
"""

import io
import json
import logging
import os
import struct
from pathlib import Path
from typing import Union

import numpy as np
import torch

from data import DatasetSplit
from errors import CorruptStoreError, IncompatibleCheckpointError
from models import AnomalyModel
from numeric import DTYPE, FlatParams, layout_size
from training import Checkpoint, CheckpointStore

logger = logging.getLogger(__name__)

STORE_MAGIC = b"TIAD"
SPLIT_MAGIC = b"TIAS"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def _write_atomic(path: PathLike, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


class _Reader:
    """Cursor over a byte buffer that turns short reads into CorruptStoreError"""

    def __init__(self, data: bytes, path: PathLike):
        self.data = data
        self.offset = 0
        self.path = str(path)

    def take(self, n: int) -> bytes:
        if n < 0 or self.offset + n > len(self.data):
            raise CorruptStoreError("file is truncated", path=self.path)
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values if len(values) > 1 else values[0]

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").copy()

    def finish(self):
        if self.offset != len(self.data):
            raise CorruptStoreError(f"{len(self.data) - self.offset} unexpected trailing bytes", path=self.path)


def _header(reader: _Reader, magic: bytes):
    if reader.take(4) != magic:
        raise CorruptStoreError(f"bad magic bytes (expected {magic!r})", path=reader.path)
    version = reader.unpack("<I")
    if version != FORMAT_VERSION:
        raise CorruptStoreError(f"unsupported format version {version}", path=reader.path)


def _read_file(path: PathLike) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        logger.error(f"❌ Cannot read {path}: {e}")
        raise


# =========================================================================
# CHECKPOINT STORE
# =========================================================================

def save_store(store: CheckpointStore, path: PathLike):
    buf = io.BytesIO()
    buf.write(STORE_MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(store.fingerprint)
    buf.write(struct.pack("<Q", len(store)))
    for cp in store:
        values = cp.params.values.detach().numpy().astype("<f8", copy=False)
        buf.write(struct.pack("<QdQ", cp.epoch, cp.learning_rate, values.size))
        buf.write(values.tobytes())
    _write_atomic(path, buf.getvalue())
    logger.info(f"💾 Checkpoint store saved: {path} ({len(store)} checkpoints)")


def load_store(path: PathLike, model: AnomalyModel) -> CheckpointStore:
    """
    Read a store written by save_store for the given model.

    Raises:
        IncompatibleCheckpointError: the store was written for another model
        CorruptStoreError: bad magic, unknown version, truncation or trailing bytes
    """
    reader = _Reader(_read_file(path), path)
    _header(reader, STORE_MAGIC)
    fingerprint = reader.take(32)
    if fingerprint != model.fingerprint():
        raise IncompatibleCheckpointError("checkpoint store was written for a different model", path=str(path))

    layout = model.params.layout
    expected = layout_size(layout)
    count = reader.unpack("<Q")
    checkpoints = []
    for _ in range(count):
        epoch, lr, n_values = reader.unpack("<QdQ")
        if n_values != expected:
            raise CorruptStoreError(f"checkpoint at epoch {epoch} holds {n_values} values, layout needs {expected}",
                                    path=str(path))
        values = torch.from_numpy(reader.floats(n_values).astype(np.float64)).to(DTYPE)
        checkpoints.append(Checkpoint(epoch, FlatParams(values, layout), lr))
    reader.finish()

    store = CheckpointStore(fingerprint)
    for cp in checkpoints:
        store.append(cp)
    logger.info(f"📂 Checkpoint store loaded: {path} ({len(store)} checkpoints)")
    return store


# =========================================================================
# DATASET SPLIT
# =========================================================================

def _write_matrix(buf: io.BytesIO, matrix: np.ndarray):
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    rows, cols = matrix.shape
    buf.write(struct.pack("<QQ", rows, cols))
    buf.write(matrix.tobytes())


def _read_matrix(reader: _Reader) -> np.ndarray:
    rows, cols = reader.unpack("<QQ")
    return reader.floats(rows * cols).astype(np.float64).reshape(rows, cols)


def save_split(split: DatasetSplit, path: PathLike):
    meta = json.dumps(split.metadata(), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(SPLIT_MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(meta)))
    buf.write(meta)
    _write_matrix(buf, split.train)
    _write_matrix(buf, split.val)
    labels = np.ascontiguousarray(split.val_labels, dtype=np.uint8)
    buf.write(struct.pack("<Q", labels.size))
    buf.write(labels.tobytes())
    _write_atomic(path, buf.getvalue())
    logger.info(f"💾 Split saved: {path}")


def load_split(path: PathLike) -> DatasetSplit:
    reader = _Reader(_read_file(path), path)
    _header(reader, SPLIT_MAGIC)
    meta_len = reader.unpack("<Q")
    try:
        meta = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptStoreError(f"unreadable split metadata: {e}", path=str(path))
    train = _read_matrix(reader)
    val = _read_matrix(reader)
    n_labels = reader.unpack("<Q")
    labels = np.frombuffer(reader.take(n_labels), dtype=np.uint8).astype(np.int64)
    reader.finish()
    return DatasetSplit.from_metadata(meta, train, val, labels)
