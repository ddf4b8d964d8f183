"""Minimal read-only safetensors reader backed by ``np.memmap``.

Layout: an 8-byte little-endian header length, a JSON header mapping tensor
names to ``{"dtype", "shape", "data_offsets"}``, then the raw little-endian
tensor bytes. BF16 tensors are decoded to float32 (numpy has no bfloat16).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ModelLoadError

_DTYPES = {
    "F64": np.dtype("<f8"),
    "F32": np.dtype("<f4"),
    "F16": np.dtype("<f2"),
    "BF16": np.dtype("<u2"),
    "I64": np.dtype("<i8"),
    "I32": np.dtype("<i4"),
    "I16": np.dtype("<i2"),
    "I8": np.dtype("i1"),
    "U8": np.dtype("u1"),
    "BOOL": np.dtype("?"),
}


def read_header(path) -> tuple[dict, int]:
    """Return ``(header, data_start)`` for a safetensors file."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(8)
        if len(raw) != 8:
            raise ModelLoadError(f"{path}: file too short for a safetensors header")
        (n,) = struct.unpack("<Q", raw)
        size = path.stat().st_size
        if n > size - 8:
            raise ModelLoadError(f"{path}: header length {n} exceeds file size")
        try:
            header = json.loads(fh.read(n))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelLoadError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise ModelLoadError(f"{path}: header is not a JSON object")
    return header, 8 + n


def read_metadata(path) -> dict[str, str]:
    header, _ = read_header(path)
    meta = header.get("__metadata__") or {}
    return {str(k): str(v) for k, v in meta.items()}


def load_tensors(path) -> dict[str, np.ndarray]:
    """Map every tensor of one file to a read-only array view.

    Views share a single memory map, so nothing is copied except BF16
    tensors, which are widened to float32.
    """
    path = Path(path)
    header, start = read_header(path)
    size = path.stat().st_size
    if size == start:
        buf = np.zeros(0, dtype=np.uint8)
    else:
        buf = np.memmap(path, dtype=np.uint8, mode="r")
    header.pop("__metadata__", None)
    out = {}
    for name, info in header.items():
        try:
            dtype_name = info["dtype"]
            shape = tuple(int(s) for s in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise ModelLoadError(f"{path}: malformed header entry for tensor {name!r}") from None
        if dtype_name not in _DTYPES:
            raise ModelLoadError(f"{path}: tensor {name!r} has unsupported dtype {dtype_name}")
        dtype = _DTYPES[dtype_name]
        count = int(np.prod(shape, dtype=np.int64))
        if end - begin != count * dtype.itemsize or begin < 0 or start + end > size:
            raise ModelLoadError(
                f"{path}: tensor {name!r} byte range [{begin}, {end}) does not match "
                f"shape {shape} and dtype {dtype_name}"
            )
        arr = buf[start + begin : start + end].view(dtype).reshape(shape)
        if dtype_name == "BF16":
            arr = (arr.astype(np.uint32) << 16).view(np.float32)
        out[name] = arr
    return out


def load_container(path) -> dict[str, np.ndarray]:
    """Load one ``.safetensors`` file or every shard in a directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, "no such file or directory", str(path))
    if path.is_dir():
        files = sorted(path.glob("*.safetensors"))
        if not files:
            raise ModelLoadError(f"{path}: directory holds no .safetensors files")
    else:
        files = [path]
    tensors = {}
    for f in files:
        for name, arr in load_tensors(f).items():
            if name in tensors:
                raise ModelLoadError(f"{f}: tensor {name!r} appears in more than one shard")
            tensors[name] = arr
    return tensors


def save_tensors(path, tensors: dict[str, np.ndarray], metadata: dict[str, str] | None = None):
    """Write arrays with the reference ``safetensors`` writer."""
    from safetensors.numpy import save_file

    save_file({k: np.ascontiguousarray(v) for k, v in tensors.items()}, str(path), metadata=metadata)
