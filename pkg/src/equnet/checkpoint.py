"""Checkpoint files.

Layout::

    GUNET1\\n
    <header length in bytes>\\n
    <JSON descriptor>
    <payload: little-endian float32 tensors in descriptor order>
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .unet import ArchConfig, UNet, build_descriptor

MAGIC = b"GUNET1\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic or unparsable header."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointLengthError(CheckpointError):
    """Descriptor and payload disagree on sizes."""


def _tensors(model: UNet):
    for name, p in model.named_parameters():
        yield name, "param", p.data
    for name, b in model.named_buffers():
        yield name, "buffer", b


def save_checkpoint(model: UNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    entries, chunks = [], []
    for name, role, arr in _tensors(model):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "role": role, "shape": list(arr.shape), "nbytes": len(data)})
        chunks.append(data)
    header = {
        "version": FORMAT_VERSION,
        "descriptor": build_descriptor(model.cfg).to_dict(),
        "tensors": entries,
        "extra": extra or {},
    }
    htext = json.dumps(header, indent=1, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(htext)}\n".encode("ascii"))
        fh.write(htext)
        for c in chunks:
            fh.write(c)
    return path


def read_header(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic)")
    rest = raw[len(MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointTruncatedError(f"{path}: header length line missing")
    try:
        hlen = int(rest[:nl])
    except ValueError:
        raise CheckpointFormatError(f"{path}: bad header length line") from None
    body = rest[nl + 1:]
    if len(body) < hlen:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(body[:hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {header.get('version')!r}, expected {FORMAT_VERSION}"
        )
    return header, body[hlen:]


def load_checkpoint(path, dtype=np.float32) -> UNet:
    header, payload = read_header(path)
    cfg_d = dict(header["descriptor"]["config"])
    cfg_d["filters"] = tuple(cfg_d["filters"])
    cfg = ArchConfig(**cfg_d)
    model = UNet(cfg, seed=0, dtype=np.float32)
    expected = {name: arr for name, _, arr in _tensors(model)}
    declared = header["tensors"]
    if [t["name"] for t in declared] != list(expected):
        raise CheckpointLengthError(f"{path}: tensor list does not match the descriptor")
    for t in declared:
        n = int(np.prod(t["shape"], dtype=np.int64)) * 4
        if t["nbytes"] != n or tuple(t["shape"]) != expected[t["name"]].shape:
            raise CheckpointLengthError(f"{path}: {t['name']} declares {t['nbytes']} bytes, shape needs {n}")
    total = sum(t["nbytes"] for t in declared)
    if len(payload) < total:
        raise CheckpointTruncatedError(f"{path}: payload has {len(payload)} bytes, expected {total}")
    if len(payload) > total:
        raise CheckpointLengthError(f"{path}: {len(payload) - total} trailing bytes after payload")

    params = dict(model.named_parameters())
    offset = 0
    for t in declared:
        arr = np.frombuffer(payload, dtype="<f4", count=t["nbytes"] // 4, offset=offset)
        arr = arr.reshape(t["shape"]).astype(np.float32)
        offset += t["nbytes"]
        if t["role"] == "param":
            params[t["name"]].data[...] = arr
        else:
            expected[t["name"]][...] = arr
    if np.dtype(dtype) != np.float32:
        model.astype(dtype)
    return model


def checkpoint_config(path) -> ArchConfig:
    header, _ = read_header(path)
    cfg_d = dict(header["descriptor"]["config"])
    cfg_d["filters"] = tuple(cfg_d["filters"])
    return ArchConfig(**cfg_d)
