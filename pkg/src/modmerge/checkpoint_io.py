"""Reader and writer for header-prefixed tensor container files.

Layout of a container file::

    [8 bytes]  little-endian uint64 N, the header length
    [N bytes]  JSON object: name -> {"dtype", "shape", "data_offsets"},
               plus an optional "__metadata__" string map
    [rest]     raw little-endian tensor bytes; offsets are relative to here

A sharded checkpoint is a directory holding a JSON index file with a
``"weight_map"`` object that maps tensor names to shard file names.

Tensors are decoded to float32, the working precision of every merge
kernel. Non-finite values are rejected on read.
"""

from __future__ import annotations

import enum
import json
import math
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "CheckpointError",
    "DType",
    "Tensor",
    "TensorEntry",
    "TensorIndex",
    "open_checkpoint",
    "read_tensor",
    "write_checkpoint",
    "f32_to_bf16_bits",
    "bf16_bits_to_f32",
]

METADATA_KEY = "__metadata__"
HEADER_PREFIX = 8
# Refuse absurd headers before allocating memory for them.
MAX_HEADER_BYTES = 100 * 1024 * 1024


class CheckpointError(ValueError):
    """Raised for malformed containers, bad indices and undecodable tensors."""


class DType(str, enum.Enum):
    F64 = "F64"
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"
    I8 = "I8"
    I64 = "I64"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @property
    def is_float(self) -> bool:
        return self in (DType.F64, DType.F32, DType.F16, DType.BF16)

    @classmethod
    def parse(cls, value: "str | DType") -> "DType":
        """Accept container codes (``BF16``) and config spellings (``bfloat16``)."""
        if isinstance(value, DType):
            return value
        key = str(value).strip()
        if key in cls.__members__:
            return cls[key]
        try:
            return _ALIASES[key.lower()]
        except KeyError:
            raise CheckpointError(f"unknown dtype {value!r}") from None


_ITEMSIZE = {
    DType.F64: 8,
    DType.F32: 4,
    DType.F16: 2,
    DType.BF16: 2,
    DType.I8: 1,
    DType.I64: 8,
}

_ALIASES = {
    "float64": DType.F64,
    "double": DType.F64,
    "float32": DType.F32,
    "float": DType.F32,
    "float16": DType.F16,
    "half": DType.F16,
    "bfloat16": DType.BF16,
    "int8": DType.I8,
    "int64": DType.I64,
}

_NUMPY_LE = {
    DType.F64: "<f8",
    DType.F32: "<f4",
    DType.F16: "<f2",
    DType.I8: "<i1",
    DType.I64: "<i8",
}


@dataclass(frozen=True)
class TensorEntry:
    dtype: DType
    shape: tuple[int, ...]
    shard: Path
    data_offsets: tuple[int, int]
    # absolute file position where the data section of ``shard`` begins
    data_start: int

    @property
    def numel(self) -> int:
        return math.prod(self.shape)

    @property
    def nbytes(self) -> int:
        return self.data_offsets[1] - self.data_offsets[0]


@dataclass(frozen=True)
class TensorIndex:
    """Catalog of the tensors in a checkpoint. Holds no tensor data."""

    entries: Mapping[str, TensorEntry]
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, name: str) -> TensorEntry:
        return self.entries[name]

    def names(self) -> list[str]:
        return sorted(self.entries)


@dataclass(frozen=True)
class Tensor:
    """A named float32 array. ``values`` keeps its shape; row-major order."""

    name: str
    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_list(cls, name: str, values: Iterable[float], shape: Iterable[int] | None = None) -> "Tensor":
        arr = np.asarray(list(values), dtype=np.float32)
        if shape is not None:
            arr = arr.reshape(tuple(shape))
        return cls(name, arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def numel(self) -> int:
        return int(self.values.size)

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


# ---------------------------------------------------------------------------
# bfloat16 bit conversion

def f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round float32 values to bfloat16 (nearest, ties to even); return uint16 bits."""
    bits = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32).astype(np.uint64)
    lsb = (bits >> 16) & 1
    rounded = (bits + 0x7FFF + lsb) >> 16
    return rounded.astype(np.uint16)


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


# ---------------------------------------------------------------------------
# reading

def _no_duplicate_keys(pairs: list[tuple[str, object]]) -> dict:
    out: dict = {}
    for key, value in pairs:
        if key in out:
            raise CheckpointError(f"duplicate key {key!r} in header")
        out[key] = value
    return out


def _parse_header(path: Path) -> tuple[dict, int, int]:
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(HEADER_PREFIX)
        if len(prefix) < HEADER_PREFIX:
            raise CheckpointError(f"{path}: file shorter than the 8-byte header prefix")
        (n,) = struct.unpack("<Q", prefix)
        if n > size - HEADER_PREFIX:
            raise CheckpointError(f"{path}: header length {n} exceeds file size {size}")
        if n > MAX_HEADER_BYTES:
            raise CheckpointError(f"{path}: header length {n} is unreasonably large")
        raw = fh.read(n)
    try:
        header = json.loads(raw.decode("utf-8"), object_pairs_hook=_no_duplicate_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header JSON ({exc})") from None
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    return header, HEADER_PREFIX + n, size


def _read_single(path: Path) -> tuple[dict[str, TensorEntry], dict[str, str]]:
    header, data_start, _ = _parse_header(path)
    metadata = header.pop(METADATA_KEY, None) or {}
    if not isinstance(metadata, dict):
        raise CheckpointError(f"{path}: {METADATA_KEY} must be an object")

    entries: dict[str, TensorEntry] = {}
    for name, info in header.items():
        if not isinstance(info, dict):
            raise CheckpointError(f"{path}: entry {name!r} is not an object")
        if not isinstance(info.get("dtype"), str):
            raise CheckpointError(f"{path}: entry {name!r} lacks a dtype string")
        dtype = DType.parse(info["dtype"])
        try:
            shape = tuple(int(d) for d in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except KeyError as exc:
            raise CheckpointError(f"{path}: entry {name!r} lacks {exc.args[0]!r}") from None
        except (TypeError, ValueError):
            raise CheckpointError(f"{path}: entry {name!r} has malformed shape or offsets") from None
        if dtype.value != info["dtype"]:
            raise CheckpointError(f"{path}: unknown dtype {info['dtype']!r} for {name!r}")
        if any(d < 0 for d in shape) or begin < 0 or end < begin:
            raise CheckpointError(f"{path}: entry {name!r} has negative shape or offsets")
        if end - begin != math.prod(shape) * dtype.itemsize:
            raise CheckpointError(
                f"{path}: entry {name!r} spans {end - begin} bytes, "
                f"shape {list(shape)} of {dtype.value} needs {math.prod(shape) * dtype.itemsize}"
            )
        entries[name] = TensorEntry(dtype, shape, path, (begin, end), data_start)

    spans = sorted((e.data_offsets, n) for n, e in entries.items() if e.nbytes)
    for (prev, prev_name), (cur, cur_name) in zip(spans, spans[1:]):
        if cur[0] < prev[1]:
            raise CheckpointError(f"{path}: byte ranges of {prev_name!r} and {cur_name!r} overlap")
    return entries, {str(k): str(v) for k, v in metadata.items()}


def _find_shard_index(directory: Path) -> Path | None:
    candidates = sorted(directory.glob("*.index.json"))
    if not candidates:
        return None
    preferred = directory / "model.safetensors.index.json"
    return preferred if preferred in candidates else candidates[0]


def open_checkpoint(path: str | os.PathLike) -> TensorIndex:
    """Index a container file or a sharded checkpoint directory.

    Only headers are read. A directory must hold a ``*.index.json`` weight map,
    or exactly one ``*.safetensors`` file.

    Raises:
        CheckpointError: On malformed headers, unknown dtypes, inconsistent
            offsets, or tensor names duplicated across shards.
        FileNotFoundError: If ``path`` or a referenced shard does not exist.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    if path.is_file():
        entries, metadata = _read_single(path)
        return TensorIndex(entries, metadata)

    index_file = _find_shard_index(path)
    if index_file is None:
        singles = sorted(path.glob("*.safetensors"))
        if len(singles) == 1:
            return open_checkpoint(singles[0])
        raise CheckpointError(f"{path}: no shard index file and not exactly one container file")

    try:
        doc = json.loads(index_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{index_file}: malformed index JSON ({exc})") from None
    weight_map = doc.get("weight_map") if isinstance(doc, dict) else None
    if not isinstance(weight_map, dict):
        raise CheckpointError(f"{index_file}: missing or invalid 'weight_map'")

    entries: dict[str, TensorEntry] = {}
    metadata: dict[str, str] = {}
    for shard_name in sorted(set(map(str, weight_map.values()))):
        shard_path = path / shard_name
        if not shard_path.is_file():
            raise FileNotFoundError(f"shard referenced by {index_file.name} is missing: {shard_path}")
        shard_entries, shard_meta = _read_single(shard_path)
        for name, entry in shard_entries.items():
            if name in entries:
                raise CheckpointError(
                    f"duplicate tensor name {name!r} in {entries[name].shard.name} and {shard_name}"
                )
            entries[name] = entry
        metadata.update(shard_meta)

    for name, shard_name in weight_map.items():
        entry = entries.get(name)
        if entry is None or entry.shard.name != shard_name:
            raise CheckpointError(f"{index_file}: tensor {name!r} not found in shard {shard_name}")
    return TensorIndex(entries, metadata)


def _decode(raw: bytes, dtype: DType) -> np.ndarray:
    if dtype is DType.BF16:
        return bf16_bits_to_f32(np.frombuffer(raw, dtype="<u2"))
    arr = np.frombuffer(raw, dtype=_NUMPY_LE[dtype])
    if dtype is DType.F64:
        warnings.warn("F64 tensor down-converted to F32", stacklevel=3)
    return arr.astype(np.float32)


def read_tensor(index: TensorIndex, name: str) -> Tensor:
    """Load one tensor as float32. Safe to call from several threads at once.

    Raises:
        KeyError: If ``name`` is not in the index.
        CheckpointError: If the byte range lies outside the file or a value
            is NaN or infinite.
    """
    try:
        entry = index.entries[name]
    except KeyError:
        raise KeyError(f"tensor {name!r} not in checkpoint") from None
    begin, end = entry.data_offsets
    start = entry.data_start + begin
    with open(entry.shard, "rb") as fh:
        fh.seek(0, os.SEEK_END)
        if entry.data_start + end > fh.tell():
            raise CheckpointError(
                f"{entry.shard}: byte range [{begin}, {end}) of {name!r} lies outside the file"
            )
        fh.seek(start)
        raw = fh.read(end - begin)
    values = _decode(raw, entry.dtype).reshape(entry.shape)
    if not np.all(np.isfinite(values)):
        bad = int(np.count_nonzero(~np.isfinite(values)))
        raise CheckpointError(f"tensor {name!r} contains {bad} NaN/Inf value(s)")
    return Tensor(name, values)


# ---------------------------------------------------------------------------
# writing

def _encode(values: np.ndarray, dtype: DType, name: str) -> bytes:
    if dtype is DType.BF16:
        bits = f32_to_bf16_bits(values)
        check = bf16_bits_to_f32(bits)
        out = bits.astype("<u2")
    else:
        with np.errstate(over="ignore"):
            out = np.asarray(values).astype(_NUMPY_LE[dtype])
        check = out
    if not np.all(np.isfinite(check)):
        raise CheckpointError(f"tensor {name!r} overflows {dtype.value}")
    return out.tobytes(order="C")


def write_checkpoint(
    path: str | os.PathLike,
    tensors: Iterable[Tensor],
    out_dtype: DType | str = DType.F32,
    metadata: Mapping[str, str] | None = None,
) -> None:
    """Write tensors to a single container file, sorted by name.

    The file is written to a temporary sibling and renamed into place, so a
    failed write never leaves a partial file at ``path``.
    """
    out_dtype = DType.parse(out_dtype)
    if not out_dtype.is_float:
        raise CheckpointError(f"output dtype must be a float type, got {out_dtype.value}")
    by_name: dict[str, Tensor] = {}
    for t in tensors:
        if t.name in by_name:
            raise CheckpointError(f"duplicate tensor name {t.name!r}")
        if t.name == METADATA_KEY:
            raise CheckpointError(f"tensor name {METADATA_KEY!r} is reserved")
        by_name[t.name] = t

    header: dict[str, object] = {}
    if metadata:
        header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
    chunks: list[bytes] = []
    offset = 0
    for name in sorted(by_name):
        t = by_name[name]
        blob = _encode(t.values, out_dtype, name)
        header[name] = {
            "dtype": out_dtype.value,
            "shape": list(t.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        chunks.append(blob)
        offset += len(blob)

    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    # pad with spaces so the data section starts 8-byte aligned
    header_bytes += b" " * (-len(header_bytes) % 8)

    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for blob in chunks:
                fh.write(blob)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
