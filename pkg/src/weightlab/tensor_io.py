"""Reading and writing safetensors checkpoints.

File layout: ``[u64 LE header length N][N bytes of UTF-8 JSON][data buffer]``.
Each JSON key is a tensor name mapping to ``{"dtype", "shape",
"data_offsets"}``; offsets are relative to the start of the data buffer.
An optional ``__metadata__`` key holds a string-to-string map.

Float payloads (F64/F32/F16/BF16) are decoded to float64 for analysis.
Anything else is kept as raw bytes so merging can pass it through.
"""

from __future__ import annotations

import io
import json
import math
import mmap
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import MalformedHeader, NonFiniteValue, UnknownTensor, UnsupportedDType

FLOAT_DTYPES = ("F64", "F32", "F16", "BF16")

DTYPE_WIDTHS = {
    "F64": 8,
    "F32": 4,
    "F16": 2,
    "BF16": 2,
    # carried for bounds checking and pass-through only
    "I64": 8,
    "U64": 8,
    "I32": 4,
    "U32": 4,
    "I16": 2,
    "U16": 2,
    "I8": 1,
    "U8": 1,
    "BOOL": 1,
    "F8_E4M3": 1,
    "F8_E5M2": 1,
}

METADATA_KEY = "__metadata__"
_HEADER_ALIGN = 8

PathLike = Union[str, os.PathLike]


def is_float_dtype(dtype: str) -> bool:
    return dtype in FLOAT_DTYPES


def _numel(shape: Sequence[int]) -> int:
    return math.prod(shape) if shape else 1


@dataclass(frozen=True)
class TensorMeta:
    name: str
    dtype: str
    shape: tuple[int, ...]
    byte_range: tuple[int, int]

    @property
    def numel(self) -> int:
        return _numel(self.shape)

    @property
    def nbytes(self) -> int:
        return self.byte_range[1] - self.byte_range[0]


@dataclass
class TensorRecord:
    """A named tensor decoded to float64, stored row-major in ``values``."""

    name: str
    shape: tuple[int, ...]
    values: np.ndarray
    source_dtype: str = "F64"

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.values = np.asarray(self.values, dtype=np.float64).reshape(self.shape)

    @classmethod
    def from_array(cls, name: str, array, source_dtype: str = "F64") -> "TensorRecord":
        array = np.asarray(array, dtype=np.float64)
        return cls(name, array.shape, array, source_dtype)

    @property
    def has_nonfinite(self) -> bool:
        return not bool(np.isfinite(self.values).all())


@dataclass(frozen=True)
class RawTensor:
    """A tensor whose payload is carried verbatim (non-float dtypes)."""

    name: str
    dtype: str
    shape: tuple[int, ...]
    data: bytes


@dataclass(frozen=True)
class SkipNotice:
    """Yielded by :func:`iter_tensors` in place of tensors it cannot decode."""

    name: str
    dtype: str
    shape: tuple[int, ...]


@dataclass
class ModelIndex:
    """Parsed header plus a handle on the data buffer.

    Treated as immutable once built; ``load_tensor`` only reads from it.
    """

    metas: dict[str, TensorMeta]
    metadata: dict[str, str] | None
    data_buffer: object = field(repr=False)
    source: str | None = None
    _closer: object = field(default=None, repr=False)

    def __contains__(self, name: str) -> bool:
        return name in self.metas

    def __len__(self) -> int:
        return len(self.metas)

    @property
    def names(self) -> list[str]:
        return list(self.metas)

    def raw_bytes(self, name: str) -> bytes:
        meta = self._meta(name)
        start, end = meta.byte_range
        return bytes(memoryview(self.data_buffer)[start:end])

    def load(self, name: str) -> TensorRecord:
        return load_tensor(self, name)

    def _meta(self, name: str) -> TensorMeta:
        try:
            return self.metas[name]
        except KeyError:
            raise UnknownTensor(f"no tensor named {name!r}") from None

    def close(self) -> None:
        closer = self._closer
        self._closer = None
        if closer is None:
            return
        mm, views = closer
        try:
            for view in views:
                view.release()
            mm.close()
        except BufferError:
            # a caller still holds a view; the map is freed with it
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# reading


def _open_buffer(file) -> tuple[object, str | None, object]:
    if isinstance(file, (bytes, bytearray, memoryview)):
        return memoryview(file), None, None
    if isinstance(file, (str, os.PathLike)):
        path = Path(file)
        with open(path, "rb") as fh:
            if os.fstat(fh.fileno()).st_size == 0:
                return memoryview(b""), str(path), None
            mm = mmap.mmap(fh.fileno(), 0, access=mmap.ACCESS_READ)
        return memoryview(mm), str(path), mm
    if hasattr(file, "read"):
        return memoryview(file.read()), getattr(file, "name", None), None
    raise TypeError(f"cannot read a checkpoint from {type(file).__name__}")


def read_header(file) -> ModelIndex:
    """Parse a safetensors file (path, bytes or binary file object)."""
    buf, source, closer = _open_buffer(file)
    try:
        return _parse(buf, source, closer)
    except Exception:
        if closer is not None:
            try:
                buf.release()
                closer.close()
            except BufferError:
                pass
        raise


def _unique_keys(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise MalformedHeader(f"duplicate key {key!r} in header")
        out[key] = value
    return out


def _parse(buf: memoryview, source, closer) -> ModelIndex:
    if len(buf) < 8:
        raise MalformedHeader(f"file is {len(buf)} bytes, too short for the 8-byte length prefix")
    (n,) = struct.unpack("<Q", buf[:8])
    if n > len(buf) - 8:
        raise MalformedHeader(f"header length {n} exceeds file size {len(buf)}")
    try:
        header = json.loads(bytes(buf[8 : 8 + n]).decode("utf-8"), object_pairs_hook=_unique_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeader(f"header is not valid UTF-8 JSON: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedHeader("header JSON must be an object")

    data = buf[8 + n :]
    metadata = None
    metas: dict[str, TensorMeta] = {}
    for name, entry in header.items():
        if name == METADATA_KEY:
            if not isinstance(entry, dict) or not all(
                isinstance(k, str) and isinstance(v, str) for k, v in entry.items()
            ):
                raise MalformedHeader("__metadata__ must map strings to strings")
            metadata = dict(entry)
            continue
        metas[name] = _parse_entry(name, entry, len(data))

    ordered = sorted((m for m in metas.values() if m.nbytes), key=lambda m: m.byte_range)
    for prev, cur in zip(ordered, ordered[1:]):
        if cur.byte_range[0] < prev.byte_range[1]:
            raise MalformedHeader(
                f"tensor {cur.name!r} overlaps tensor {prev.name!r} in the data buffer"
            )
    closer = (closer, (data, buf)) if closer is not None else None
    return ModelIndex(metas, metadata, data, source, closer)


def _parse_entry(name: str, entry, data_len: int) -> TensorMeta:
    if not isinstance(entry, dict):
        raise MalformedHeader(f"tensor {name!r}: entry must be an object")
    missing = {"dtype", "shape", "data_offsets"} - entry.keys()
    if missing:
        raise MalformedHeader(f"tensor {name!r}: missing {sorted(missing)}")
    dtype, shape, offsets = entry["dtype"], entry["shape"], entry["data_offsets"]
    if not isinstance(dtype, str):
        raise MalformedHeader(f"tensor {name!r}: dtype must be a string")
    if not isinstance(shape, list) or not all(
        isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in shape
    ):
        raise MalformedHeader(f"tensor {name!r}: shape must be a list of non-negative ints")
    if (
        not isinstance(offsets, list)
        or len(offsets) != 2
        or not all(isinstance(o, int) and not isinstance(o, bool) for o in offsets)
    ):
        raise MalformedHeader(f"tensor {name!r}: data_offsets must be [start, end]")
    start, end = offsets
    if not 0 <= start <= end:
        raise MalformedHeader(f"tensor {name!r}: invalid data_offsets {offsets}")
    if end > data_len:
        raise MalformedHeader(
            f"tensor {name!r}: data_offsets end {end} beyond data buffer of {data_len} bytes"
        )
    width = DTYPE_WIDTHS.get(dtype)
    if width is not None and end - start != _numel(shape) * width:
        raise MalformedHeader(
            f"tensor {name!r}: {end - start} bytes for shape {shape} of {dtype}"
        )
    return TensorMeta(name, dtype, tuple(shape), (start, end))


def decode(payload, dtype: str) -> np.ndarray:
    """Decode a little-endian float payload to a flat float64 array."""
    with np.errstate(invalid="ignore"):
        if dtype == "F64":
            return np.frombuffer(payload, dtype="<f8").astype(np.float64)
        if dtype == "F32":
            return np.frombuffer(payload, dtype="<f4").astype(np.float64)
        if dtype == "F16":
            return np.frombuffer(payload, dtype="<f2").astype(np.float64)
        if dtype == "BF16":
            bits = np.frombuffer(payload, dtype="<u2").astype(np.uint32) << 16
            return bits.view(np.float32).astype(np.float64)
    raise ValueError(f"not a float dtype: {dtype}")


def load_tensor(index: ModelIndex, name: str) -> TensorRecord:
    meta = index._meta(name)
    if not is_float_dtype(meta.dtype):
        raise UnsupportedDType(name, meta.dtype)
    start, end = meta.byte_range
    values = decode(memoryview(index.data_buffer)[start:end], meta.dtype)
    return TensorRecord(name, meta.shape, values, meta.dtype)


def iter_tensors(
    index: ModelIndex, name_pattern: str | None = None
) -> Iterator[TensorRecord | SkipNotice]:
    """Yield tensors in header order, filtered by ``re.search`` on the name.

    Tensors with non-float dtypes come out as :class:`SkipNotice`.
    """
    pattern = re.compile(name_pattern) if name_pattern else None
    for name, meta in index.metas.items():
        if pattern is not None and not pattern.search(name):
            continue
        if not is_float_dtype(meta.dtype):
            yield SkipNotice(name, meta.dtype, meta.shape)
            continue
        yield load_tensor(index, name)


# ---------------------------------------------------------------------------
# writing


def _bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round float64 to bfloat16 (nearest, ties to even) and return the bit patterns.

    Rounds from float64 directly; going through float32 first would double-round.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    out = np.empty(x.shape, dtype=np.float64)
    with np.errstate(over="ignore", invalid="ignore"):
        finite = np.isfinite(x)
        tiny = finite & (np.abs(x) < 2.0**-126)
        normal = finite & ~tiny
        mant, exp = np.frexp(x[normal])
        # 8 significant bits: 1 implicit + 7 stored
        out[normal] = np.ldexp(np.rint(np.ldexp(mant, 8)), exp - 8)
        # subnormal grid spacing is 2**-133
        out[tiny] = np.ldexp(np.rint(np.ldexp(x[tiny], 133)), -133)
        out[~finite] = x[~finite]
        f32 = out.astype(np.float32)
    bits = (f32.view(np.uint32) >> 16).astype(np.uint16)
    nan = np.isnan(x)
    if nan.any():
        sign = (np.signbit(x[nan]).astype(np.uint16)) << 15
        bits[nan] = sign | np.uint16(0x7FC0)
    return bits


def encode(values, dtype: str) -> bytes:
    """Encode values to a little-endian payload; narrowing rounds to nearest even."""
    x = np.asarray(values, dtype=np.float64).ravel()
    with np.errstate(over="ignore", invalid="ignore"):
        if dtype == "F64":
            return x.astype("<f8").tobytes()
        if dtype == "F32":
            return x.astype("<f4").tobytes()
        if dtype == "F16":
            return x.astype("<f2").tobytes()
    if dtype == "BF16":
        return _bf16_bits(x).astype("<u2").tobytes()
    raise UnsupportedDType("<encode>", dtype)


class SafetensorsWriter:
    """Streaming writer: the header is fixed up front, payloads follow in order.

    This keeps at most one tensor's payload in memory, which is what the
    merge command relies on for large checkpoints.
    """

    def __init__(
        self,
        dest: PathLike | BinaryIO,
        plan: Sequence[tuple[str, str, Sequence[int]]],
        metadata: Mapping[str, str] | None = None,
    ):
        header: dict = {}
        if metadata:
            header[METADATA_KEY] = {str(k): str(v) for k, v in metadata.items()}
        offset = 0
        self._expected: list[tuple[str, int]] = []
        for name, dtype, shape in plan:
            if name in header or name == METADATA_KEY:
                raise ValueError(f"duplicate tensor name {name!r}")
            width = DTYPE_WIDTHS.get(dtype)
            if width is None:
                raise UnsupportedDType(name, dtype)
            nbytes = _numel(shape) * width
            header[name] = {
                "dtype": dtype,
                "shape": [int(s) for s in shape],
                "data_offsets": [offset, offset + nbytes],
            }
            self._expected.append((name, nbytes))
            offset += nbytes
        blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
        blob += b" " * (-len(blob) % _HEADER_ALIGN)
        if isinstance(dest, (str, os.PathLike)):
            self._fh = open(dest, "wb")
            self._owns = True
        else:
            self._fh = dest
            self._owns = False
        self._fh.write(struct.pack("<Q", len(blob)))
        self._fh.write(blob)
        self._next = 0

    def write(self, name: str, payload: bytes) -> None:
        exp_name, exp_len = self._expected[self._next]
        if name != exp_name:
            raise ValueError(f"expected tensor {exp_name!r} next, got {name!r}")
        if len(payload) != exp_len:
            raise ValueError(f"tensor {name!r}: payload is {len(payload)} bytes, expected {exp_len}")
        self._fh.write(payload)
        self._next += 1

    def close(self) -> None:
        if self._next != len(self._expected):
            missing = [n for n, _ in self._expected[self._next :]]
            raise ValueError(f"writer closed before tensors {missing} were written")
        if self._owns:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, *rest):
        if exc_type is None:
            self.close()
        elif self._owns:
            self._fh.close()


def _target_dtype(record, dtypes) -> str:
    if isinstance(record, RawTensor):
        return record.dtype
    if dtypes is None:
        chosen = None
    elif isinstance(dtypes, str):
        chosen = dtypes
    else:
        chosen = dtypes.get(record.name)
    if chosen is None:
        chosen = record.source_dtype if is_float_dtype(record.source_dtype) else "F32"
    if not is_float_dtype(chosen):
        raise UnsupportedDType(record.name, chosen)
    return chosen


def write_model(
    tensors: Iterable[TensorRecord | RawTensor],
    dest: PathLike | BinaryIO,
    dtypes: str | Mapping[str, str] | None = None,
    metadata: Mapping[str, str] | None = None,
    allow_nonfinite: bool = True,
) -> None:
    """Write records to ``dest`` in the given order.

    ``dtypes`` is one dtype for every tensor or a per-name mapping; records
    default to their ``source_dtype``. ``RawTensor`` payloads are written as is.
    """
    tensors = list(tensors)
    plan = []
    for rec in tensors:
        dtype = _target_dtype(rec, dtypes)
        if isinstance(rec, TensorRecord):
            if rec.values.size != _numel(rec.shape):
                raise ValueError(f"tensor {rec.name!r}: {rec.values.size} values for shape {rec.shape}")
            if not allow_nonfinite and rec.has_nonfinite:
                raise NonFiniteValue(f"tensor {rec.name!r} contains non-finite values")
        plan.append((rec.name, dtype, rec.shape))
    with SafetensorsWriter(dest, plan, metadata) as writer:
        for rec, (_, dtype, _) in zip(tensors, plan):
            payload = rec.data if isinstance(rec, RawTensor) else encode(rec.values, dtype)
            writer.write(rec.name, payload)


def dumps_model(tensors, dtypes=None, metadata=None) -> bytes:
    buf = io.BytesIO()
    write_model(tensors, buf, dtypes=dtypes, metadata=metadata)
    return buf.getvalue()


def model_from_arrays(arrays: Mapping[str, object], dtype: str = "F64", source: str | None = None) -> ModelIndex:
    """Build an in-memory ModelIndex from name -> array (handy for tests and tools)."""
    records = [TensorRecord.from_array(name, arr, dtype) for name, arr in arrays.items()]
    index = read_header(dumps_model(records, dtypes=dtype))
    index.source = source
    return index
