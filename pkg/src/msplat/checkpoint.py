"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic      8 bytes  b"MSPLATCK"
    version    u32
    total      u64      byte length of the whole file
    sections   u32      number of sections
    section*   u16 name length, name (utf-8), u8 kind, u64 payload length, payload
    crc32      u32      over every preceding byte

Kind 0 is a UTF-8 JSON document; kind 1 is an array: u8 dtype code, u8 ndim,
ndim x u64 dims, then the raw little-endian data.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .color import ColorDecoder, SHColorModel
from .errors import ChecksumError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError
from .scene import GaussianCloud, SpectralBandSet

MAGIC = b"MSPLATCK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQI")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("<i4"), 4: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    band_set: SpectralBandSet
    cloud: GaussianCloud
    model: Union[ColorDecoder, SHColorModel]
    iteration: int = 0
    config: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def color_model(self) -> str:
        return "neural" if isinstance(self.model, ColorDecoder) else "sh"

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.band_set, self.cloud.copy(), self.model.copy(), self.iteration,
                          json.loads(json.dumps(self.config)), self.version)


def _array_payload(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dt not in _CODES:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    head = struct.pack("<BB", _CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def _parse_array(payload: bytes) -> np.ndarray:
    code, ndim = struct.unpack_from("<BB", payload, 0)
    if code not in _DTYPES:
        raise CheckpointError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{ndim}Q", payload, 2)
    start = 2 + 8 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if ndim else 1
    if len(payload) - start != count * dt.itemsize:
        raise CheckpointTruncatedError("array payload has the wrong length")
    return np.frombuffer(payload, dtype=dt, count=count, offset=start).reshape(shape).astype(dt.newbyteorder("="))


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "band_set": ckpt.band_set.to_dict(),
        "iteration": int(ckpt.iteration),
        "config": ckpt.config,
        "color_model": ckpt.color_model,
    }
    if isinstance(ckpt.model, SHColorModel):
        meta["sh_degree"] = ckpt.model.degree
    sections = [("meta", 0, json.dumps(meta, sort_keys=True).encode())]
    for name, arr in ckpt.cloud.arrays().items():
        sections.append((f"cloud.{name}", 1, _array_payload(arr)))
    if isinstance(ckpt.model, ColorDecoder):
        for name, arr in ckpt.model.params().items():
            sections.append((f"decoder.{name}", 1, _array_payload(arr)))
    else:
        sections.append(("sh.coeffs", 1, _array_payload(ckpt.model.coeffs)))

    body = bytearray()
    for name, kind, payload in sections:
        raw = name.encode()
        body += struct.pack("<H", len(raw)) + raw + struct.pack("<BQ", kind, len(payload)) + payload
    total = _HEADER.size + len(body) + 4
    data = _HEADER.pack(MAGIC, ckpt.version, total, len(sections)) + bytes(body)
    return data + struct.pack("<I", zlib.crc32(data) & 0xFFFFFFFF)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointTruncatedError("file shorter than the checkpoint header")
    magic, version, total, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    if len(data) < total:
        raise CheckpointTruncatedError(f"checkpoint truncated: {len(data)} of {total} bytes")
    data = data[:total]
    (crc,) = struct.unpack_from("<I", data, total - 4)
    if zlib.crc32(data[:total - 4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("checkpoint checksum mismatch")

    pos = _HEADER.size
    meta, arrays = None, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        kind, plen = struct.unpack_from("<BQ", data, pos)
        pos += 9
        payload = data[pos:pos + plen]
        pos += plen
        if kind == 0:
            meta = json.loads(payload.decode())
        else:
            arrays[name] = _parse_array(payload)
    if meta is None:
        raise CheckpointError("checkpoint has no metadata section")

    band_set = SpectralBandSet.from_dict(meta["band_set"])
    cloud = GaussianCloud(**{n: arrays[f"cloud.{n}"] for n in GaussianCloud.ARRAYS})
    if meta["color_model"] == "neural":
        n_layers = sum(1 for k in arrays if k.startswith("decoder.W"))
        model = ColorDecoder([arrays[f"decoder.W{k}"] for k in range(n_layers)],
                             [arrays[f"decoder.b{k}"] for k in range(n_layers)])
    else:
        model = SHColorModel(arrays["sh.coeffs"], band_set, int(meta.get("sh_degree", 3)))
    return Checkpoint(band_set, cloud, model, int(meta["iteration"]), meta["config"], version)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    data = to_bytes(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
