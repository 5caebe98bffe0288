"""Versioned binary checkpoint container.

Layout (all integers little-endian):

    bytes 0..3    magic ``LFCK``
    bytes 4..7    format version (u32)
    bytes 8..15   header length in bytes (u64)
    header        UTF-8 JSON: version tag, iteration counter, backbone config,
                  named-array table (name, dtype, shape, offset, nbytes)
    payload       raw array bytes, little-endian, concatenated in table order

The round trip is lossless: ``load_checkpoint(save_checkpoint(p))`` compares
equal to ``p`` array-for-array.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

from .backbone import BackboneConfig, Denoiser, ParameterSet
from .codec import LATENT_DTYPE
from .errors import CheckpointCorruptError, CheckpointVersionError

MAGIC = b"LFCK"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"), "<i8": np.dtype("<i8")}


def save_checkpoint(params: ParameterSet, path) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, tensor in params.arrays().items():
        arr = tensor.cpu().numpy()
        dtype = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr.astype(dtype, copy=False)).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "version_tag": params.version,
            "iterations": params.iterations,
            "config": params.config.to_dict(),
            "arrays": entries,
        }
    ).encode("utf-8")

    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> ParameterSet:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<Q", blob, 8)
    body = 16 + header_len
    if len(blob) < body:
        raise CheckpointCorruptError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable header") from exc

    state = {}
    for entry in header["arrays"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointCorruptError(f"{path}: unknown dtype {entry['dtype']!r}")
        start = body + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointCorruptError(f"{path}: truncated payload")
        arr = np.frombuffer(blob[start:end], dtype=dtype).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())

    config = BackboneConfig.from_dict(header["config"])
    model = Denoiser(config).to(LATENT_DTYPE)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointCorruptError(f"{path}: array table mismatch: {exc}") from exc
    return ParameterSet(
        model=model,
        version=header["version_tag"],
        iterations=header["iterations"],
        config=config,
    )
