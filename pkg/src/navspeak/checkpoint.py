"""Single-file checkpoint container.

Layout: 8-byte magic, uint32 schema version, uint64 payload length, 32-byte
SHA-256 of the payload, then the payload (a ``torch.save`` archive holding
the embedded config, vocabulary, named parameter groups and optional
optimizer state). A length or digest mismatch aborts the load before any
parameter is touched.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct

import torch

from .errors import IntegrityError, MigrationError

MAGIC = b"NAVSPKCK"
SCHEMA_VERSION = 1
_HEADER = struct.Struct("<8sIQ32s")

GROUPS = ("encoder", "embeddings", "lm", "adapters", "stmt")


def group_of(param_name):
    if param_name.startswith("encoder."):
        return "encoder"
    if param_name.startswith("stmt."):
        return "stmt"
    if param_name.startswith(("lm.tok_emb.", "lm.pos_emb.")):
        return "embeddings"
    if ".adapter." in param_name:
        return "adapters"
    return "lm"


def split_groups(state_dict):
    groups = {g: {} for g in GROUPS}
    for name, tensor in state_dict.items():
        groups[group_of(name)][name] = tensor
    return groups


def merge_groups(groups):
    merged = {}
    for g in GROUPS:
        merged.update(groups.get(g, {}))
    return merged


def save_checkpoint(path, *, config, vocab, state_dict, step=0, optimizer=None, extra=None,
                    version=SCHEMA_VERSION):
    payload = {
        "schema_version": version,
        "config": config,
        "vocab": list(vocab),
        "groups": split_groups({k: v.detach().clone() for k, v in state_dict.items()}),
        "step": int(step),
        "optimizer": optimizer,
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    body = buf.getvalue()
    header = _HEADER.pack(MAGIC, version, len(body), hashlib.sha256(body).digest())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(body)
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise IntegrityError(f"{path}: file too short for a checkpoint header")
    magic, version, length, digest = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    if version != SCHEMA_VERSION:
        raise MigrationError(version, SCHEMA_VERSION)
    body = blob[_HEADER.size:]
    if len(body) != length:
        raise IntegrityError(f"{path}: payload is {len(body)} bytes, header says {length}")
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: payload digest mismatch")
    payload = torch.load(io.BytesIO(body), map_location="cpu", weights_only=True)
    payload["state_dict"] = merge_groups(payload["groups"])
    return payload
