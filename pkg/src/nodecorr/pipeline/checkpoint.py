"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"NODECORR"
    version      uint32    FORMAT_VERSION
    meta_len     uint32
    meta         meta_len bytes of UTF-8 JSON (sorted keys): block config,
                 in_dim, num_classes, seed, dtype
    n_params     uint32
    n_params times:
        name_len uint16, name (UTF-8)
        dtype    uint8     0 = float64, 1 = float32
        ndim     uint8
        shape    ndim x uint32
        data     prod(shape) little-endian IEEE-754 values, row-major

Parameters are written in registration order, so the same model always
serializes to the same bytes.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..exceptions import VersionError
from .model import BlockConfig, SegmentationModel

MAGIC = b"NODECORR"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("float64"): 0, np.dtype("float32"): 1}


def model_meta(model: SegmentationModel) -> dict:
    return {
        "config": {
            "channels": model.config.channels,
            "k": model.config.k,
            "dilation": model.config.dilation,
            "reduction": model.config.reduction,
            "variant": model.config.variant,
            "nonlocal_cap": model.config.nonlocal_cap,
        },
        "in_dim": model.in_dim,
        "num_classes": model.num_classes,
        "seed": model.seed,
        "dtype": model.dtype.name,
    }


def dumps(model: SegmentationModel) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(model_meta(model), sort_keys=True).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(model.store)))
    for name, value in model.store.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", _CODES[value.dtype], value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype=value.dtype.newbyteorder("<")).tobytes())
    return buf.getvalue()


def _read(buf: io.BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise VersionError("truncated checkpoint")
    return data


def loads(data: bytes, expect: Optional[dict] = None) -> SegmentationModel:
    """Rebuild a model; ``expect`` (a :func:`model_meta`-style dict) guards shapes."""
    buf = io.BytesIO(data)
    if _read(buf, len(MAGIC)) != MAGIC:
        raise VersionError("not a nodecorr checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", _read(buf, 8))
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    meta = json.loads(_read(buf, meta_len).decode("utf-8"))
    if expect is not None:
        for key in ("config", "in_dim", "num_classes"):
            if key in expect and expect[key] != meta[key]:
                raise VersionError(f"checkpoint {key}={meta[key]!r} does not match {expect[key]!r}")
    model = SegmentationModel(BlockConfig(**meta["config"]), meta["in_dim"], meta["num_classes"],
                              seed=meta["seed"], dtype=np.dtype(meta["dtype"]))
    (n_params,) = struct.unpack("<I", _read(buf, 4))
    state = {}
    for _ in range(n_params):
        (name_len,) = struct.unpack("<H", _read(buf, 2))
        name = _read(buf, name_len).decode("utf-8")
        code, ndim = struct.unpack("<BB", _read(buf, 2))
        if code not in _DTYPES:
            raise VersionError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        dt = _DTYPES[code]
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(_read(buf, count * dt.itemsize), dtype=dt).reshape(shape)
    if buf.read(1):
        raise VersionError("trailing bytes after checkpoint payload")
    try:
        model.store.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise VersionError(f"checkpoint parameters do not fit the model: {exc}") from None
    return model


def save_checkpoint(model: SegmentationModel, path: Union[str, Path]) -> None:
    Path(path).write_bytes(dumps(model))


def load_checkpoint(path: Union[str, Path], expect: Optional[dict] = None) -> SegmentationModel:
    return loads(Path(path).read_bytes(), expect)
