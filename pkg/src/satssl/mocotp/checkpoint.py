"""Versioned binary checkpoints.

Layout::

    b"SATSSLCK"                 8-byte magic
    uint32 LE                   format version
    uint64 LE                   header length in bytes
    header                      UTF-8 JSON: config, encoder config, tensor table
    payload                     concatenated little-endian tensors

Each tensor-table entry is ``{"name", "dtype", "shape", "offset", "nbytes"}`` with the
offset relative to the payload start.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from satssl.mocotp.config import ContrastiveConfig
from satssl.mocotp.encoder import ContrastiveEncoder, EncoderConfig, EncoderState

MAGIC = b"SATSSLCK"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def _tensors(state: EncoderState):
    for prefix, module in (("query", state.query), ("key", state.key)):
        for name, t in module.state_dict().items():
            yield f"{prefix}.{name}", t.detach().cpu()


def save_checkpoint(state: EncoderState, cfg: ContrastiveConfig | None, path, extra: dict | None = None) -> None:
    table = []
    chunks = []
    offset = 0
    for name, t in _tensors(state):
        dtype = str(t.dtype).replace("torch.", "")
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name}")
        buf = np.ascontiguousarray(t.numpy(), dtype=_DTYPES[dtype]).tobytes()
        table.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = {
        "config": None if cfg is None else cfg.to_dict(),
        "encoder": state.cfg.to_dict(),
        "tensors": table,
        "payload_bytes": offset,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    fixed = fh.read(12)
    if len(fixed) != 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", fixed)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint format version {version} is incompatible with reader version {FORMAT_VERSION}"
        )
    hbytes = fh.read(hlen)
    if len(hbytes) != hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(hbytes)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc.msg})") from None


def load_checkpoint(path):
    """Return ``(EncoderState, ContrastiveConfig | None, extra)``; nothing is built on failure."""
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        payload = fh.read()
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, expected {header['payload_bytes']} (truncated?)"
        )
    arrays = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=_DTYPES[entry["dtype"]])
        arrays[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())

    enc_cfg = EncoderConfig.from_dict(header["encoder"])
    query, key = ContrastiveEncoder(enc_cfg), ContrastiveEncoder(enc_cfg)
    for prefix, module in (("query", query), ("key", key)):
        sd = {n[len(prefix) + 1 :]: t for n, t in arrays.items() if n.startswith(prefix + ".")}
        try:
            module.load_state_dict(sd, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: {exc}") from None
    cfg = None if header["config"] is None else ContrastiveConfig.from_dict(header["config"])
    return EncoderState(query, key), cfg, header.get("extra", {})
