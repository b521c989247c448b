"""Binary checkpoint container: a JSON header followed by raw float64 blocks.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"KDSSLCK\\0"
    offset 8   4 bytes   uint32 format version
    offset 12  8 bytes   uint64 header length H
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          parameter blocks, '<f8', C order, in header order

The header lists every block as ``{"member": k, "index": i, "shape": [...]}``
so the payload can be sliced without knowing the architecture. See
``docs/checkpoint_format.md`` for the field list.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .augment import Normalizer
from .ensemble import Ensemble
from .errors import CheckpointVersionError, ParseError
from .model import ModelSpec, build_model

MAGIC = b"KDSSLCK\0"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    version: int
    config: dict
    model_spec: ModelSpec
    members: list  # per member: list of parameter arrays
    normalizer: Optional[Normalizer] = None
    iteration: Optional[int] = None
    epoch: Optional[int] = None
    metrics: dict = field(default_factory=dict)

    def ensemble(self) -> Ensemble:
        return Ensemble([build_model(self.model_spec, params) for params in self.members])


def _config_dict(cfg) -> dict:
    if cfg is None:
        return {}
    if isinstance(cfg, dict):
        return cfg
    return cfg.to_dict()


def save_checkpoint(ensemble: Ensemble, cfg, path, normalizer: Optional[Normalizer] = None,
                    iteration: Optional[int] = None, epoch: Optional[int] = None,
                    metrics: Optional[dict] = None) -> str:
    blocks = []
    for k, member in enumerate(ensemble.members):
        for i, p in enumerate(member.params):
            blocks.append({"member": k, "index": i, "shape": list(p.shape)})
    header = {
        "version": FORMAT_VERSION,
        "config": _config_dict(cfg),
        "model_spec": ensemble.spec.to_dict(),
        "members": ensemble.K,
        "blocks": blocks,
        "normalizer": normalizer.to_dict() if normalizer is not None else None,
        "iteration": iteration,
        "epoch": epoch,
        "metrics": metrics or {},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(raw)))
        fh.write(raw)
        for member in ensemble.members:
            for p in member.params:
                fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _PREFIX.size:
        raise ParseError(f"{path}: truncated checkpoint prefix ({len(data)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ParseError(f"{path}: not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != version:
        raise CheckpointVersionError(f"{path}: header version {header.get('version')} != prefix {version}")
    offset = start + hlen
    members = [[] for _ in range(header["members"])]
    for b in header["blocks"]:
        shape = tuple(b["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if len(data) < offset + nbytes:
            raise ParseError(f"{path}: truncated parameter block (member {b['member']}, index {b['index']})")
        arr = np.frombuffer(data, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape)
        members[b["member"]].append(arr.astype(np.float64))
        offset += nbytes
    if offset != len(data):
        raise ParseError(f"{path}: {len(data) - offset} trailing bytes after parameter blocks")
    norm = header.get("normalizer")
    return Checkpoint(
        version=version,
        config=header["config"],
        model_spec=ModelSpec.from_dict(header["model_spec"]),
        members=members,
        normalizer=Normalizer.from_dict(norm) if norm is not None else None,
        iteration=header.get("iteration"),
        epoch=header.get("epoch"),
        metrics=header.get("metrics", {}),
    )
