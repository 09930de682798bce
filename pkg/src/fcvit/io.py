"""Bit-exact weight and tensor files.

Weight file layout (all integers little-endian)::

    b"FCVT" | u32 version | u64 header_len | header JSON (space padded)
    | payload

The header maps each registry name to ``{"shape", "dtype", "byte_offset",
"byte_length"}`` with offsets relative to the payload start, every tensor
64-byte aligned. An optional ``"__metadata__"`` entry carries the model
config. The payload starts on a 64-byte boundary of the file.

Tensor file layout::

    b"FCTN" | u32 version | u32 ndim | u64 dims[ndim] | u8 dtype (0=f32, 1=f64)
    | raw payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, build_model

WEIGHT_MAGIC = b"FCVT"
TENSOR_MAGIC = b"FCTN"
VERSION = 1
ALIGN = 64
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """The file is not a valid weight/tensor file."""


class TruncatedFileError(FormatError):
    """The file ends before the extent its header declares."""


def _dtype_name(dtype: np.dtype) -> str:
    for name, dt in _DTYPES.items():
        if np.dtype(dtype) == dt.newbyteorder("="):
            return name
    raise FormatError(f"unsupported dtype {dtype}")


def _pad_to(n: int, align: int = ALIGN) -> int:
    return -n % align


def save_weights(params: ModelParams, path: str | Path) -> None:
    header: dict = {"__metadata__": {"config": params.config.to_dict()}}
    offset = 0
    arrays = []
    for name, t in params.named_tensors():
        arr = np.ascontiguousarray(t.data)
        dt = _dtype_name(arr.dtype)
        offset += _pad_to(offset)
        header[name] = {"shape": list(arr.shape), "dtype": dt,
                        "byte_offset": offset, "byte_length": arr.nbytes}
        arrays.append((offset, arr.astype(_DTYPES[dt], copy=False)))
        offset += arr.nbytes
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    blob += b" " * _pad_to(16 + len(blob))
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        pos = 0
        for off, arr in arrays:
            fh.write(b"\0" * (off - pos))
            fh.write(arr.tobytes())
            pos = off + arr.nbytes


def read_weight_file(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and validate a weight file -> (metadata, name -> array)."""
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise TruncatedFileError("file shorter than the fixed preamble")
    if raw[:4] != WEIGHT_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}")
    version, header_len = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    start = 16 + header_len
    if start > len(raw):
        raise TruncatedFileError("header extends past end of file")
    try:
        header = json.loads(raw[16:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    meta = header.pop("__metadata__", {})
    entries = sorted(header.items(), key=lambda kv: kv[1]["byte_offset"])
    arrays = {}
    end = 0
    for name, e in entries:
        try:
            dtype = _DTYPES[e["dtype"]]
            shape = tuple(int(s) for s in e["shape"])
            off, length = int(e["byte_offset"]), int(e["byte_length"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"malformed header entry for {name!r}") from None
        if off < end:
            raise FormatError(f"tensor {name!r} overlaps its predecessor")
        if off % ALIGN:
            raise FormatError(f"tensor {name!r} is not {ALIGN}-byte aligned")
        if length != int(np.prod(shape)) * dtype.itemsize:
            raise FormatError(f"tensor {name!r} byte length disagrees with its shape")
        end = off + length
        if start + end > len(raw):
            raise TruncatedFileError(f"tensor {name!r} extends past end of file")
        arrays[name] = np.frombuffer(raw, dtype, count=length // dtype.itemsize,
                                     offset=start + off).reshape(shape).astype(dtype.newbyteorder("="))
    if start + end != len(raw):
        raise FormatError(f"file has {len(raw) - start - end} trailing bytes")
    return meta, arrays


def load_weights(path: str | Path, config: ModelConfig | None = None) -> ModelParams:
    """Load weights into a model built from ``config`` (or the stored config).

    Every registry name must be present with the expected shape, and the
    file may hold no other tensors.
    """
    meta, arrays = read_weight_file(path)
    if config is None:
        if "config" not in meta:
            raise FormatError("file has no stored config; pass one explicitly")
        config = ModelConfig.from_dict(meta["config"])
    dtypes = {a.dtype for a in arrays.values()}
    dtype = dtypes.pop() if len(dtypes) == 1 else np.float32
    params = build_model(config, dtype=dtype, init="zeros")
    state = params.state_dict()
    missing = sorted(set(state) - set(arrays))
    unknown = sorted(set(arrays) - set(state))
    if missing or unknown:
        raise FormatError(f"registry mismatch: missing={missing[:5]} unknown={unknown[:5]}")
    for name, t in state.items():
        if arrays[name].shape != t.shape:
            raise FormatError(f"{name}: stored shape {arrays[name].shape} != expected {t.shape}")
        t.data = arrays[name]
    return params


def save_tensor(array, path: str | Path) -> None:
    arr = np.ascontiguousarray(getattr(array, "data", array))
    name = _dtype_name(arr.dtype)
    tag = 0 if name == "f32" else 1
    if arr.ndim == 0:
        arr = arr.reshape(1)
    with open(path, "wb") as fh:
        fh.write(TENSOR_MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<B", tag))
        fh.write(arr.astype(_DTYPES[name], copy=False).tobytes())


def load_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedFileError("file shorter than the fixed preamble")
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}")
    version, ndim = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    head = 12 + 8 * ndim + 1
    if len(raw) < head:
        raise TruncatedFileError("file ends inside the dimension list")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 12)
    tag = raw[head - 1]
    if tag not in _TAGS:
        raise FormatError(f"unknown dtype tag {tag}")
    dtype = _TAGS[tag]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - head < expected:
        raise TruncatedFileError(f"payload has {len(raw) - head} bytes, expected {expected}")
    if len(raw) - head > expected:
        raise FormatError("trailing bytes after payload")
    return np.frombuffer(raw, dtype, offset=head).reshape(dims).astype(dtype.newbyteorder("="))
