"""Self-contained weight files: a JSON manifest plus raw tensor bytes.

Layout: 4-byte magic, little-endian u32 manifest length, UTF-8 JSON
manifest, then the concatenated tensor payloads. All tensors are stored
as little-endian float64 at offsets assigned in sorted name order, so
saving the same weights twice produces identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .indexer import IndexerParams
from .memory import MemorySlowWeights

MAGIC = b"KVGT"
FORMAT_VERSION = 1


def save_weights(path, tensors: dict) -> None:
    """Write name -> array (float64, any shape; scalars allowed)."""
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        raw = arr.tobytes()
        entries[name] = {"dtype": "float64", "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": FORMAT_VERSION, "tensors": entries},
                          sort_keys=True).encode("utf-8")
    blob = (MAGIC + np.uint32(len(manifest)).tobytes()
            + manifest + b"".join(chunks))
    Path(path).write_bytes(blob)


def load_weights(path) -> dict:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError("not a weights file: bad magic")
    if len(blob) < 8:
        raise ValueError("truncated weights file")
    manifest_len = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    manifest_end = 8 + manifest_len
    if len(blob) < manifest_end:
        raise ValueError("truncated weights file")
    manifest = json.loads(blob[8:manifest_end].decode("utf-8"))
    if manifest.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported weights format: {manifest.get('version')!r}")
    payload = blob[manifest_end:]
    entries = manifest["tensors"]
    spans = []
    out = {}
    for name, meta in entries.items():
        if meta["dtype"] != "float64":
            raise ValueError(f"unsupported dtype for {name!r}")
        start, nbytes = meta["offset"], meta["nbytes"]
        end = start + nbytes
        if start < 0 or end > len(payload):
            raise ValueError(f"tensor {name!r} lies outside the payload")
        spans.append((start, end))
        arr = np.frombuffer(payload[start:end], dtype="<f8")
        out[name] = arr.reshape(meta["shape"]).astype(np.float64)
    spans.sort()
    for (_, prev_end), (nxt_start, _) in zip(spans, spans[1:]):
        if nxt_start < prev_end:
            raise ValueError("overlapping tensor payloads")
    if sum(e - s for s, e in spans) != len(payload):
        raise ValueError("payload length disagrees with manifest")
    return out


def indexer_tensors(params_by_layer) -> dict:
    out = {}
    for layer, p in enumerate(params_by_layer):
        out[f"idx.{layer}.u_q"] = p.u_q
        out[f"idx.{layer}.u_k"] = p.u_k
        out[f"idx.{layer}.g"] = p.g
    return out


def unpack_indexer(tensors: dict, n_layers: int) -> list:
    out = []
    for layer in range(n_layers):
        try:
            out.append(IndexerParams(u_q=tensors[f"idx.{layer}.u_q"],
                                     u_k=tensors[f"idx.{layer}.u_k"],
                                     g=tensors[f"idx.{layer}.g"]))
        except KeyError as missing:
            raise ValueError(f"checkpoint lacks indexer tensor {missing}") from None
    return out


def memory_tensors(slow_by_layer) -> dict:
    out = {}
    for layer, s in enumerate(slow_by_layer):
        out[f"mem.{layer}.w_phi"] = s.w_phi
        out[f"mem.{layer}.w_g"] = s.w_gate
        out[f"mem.{layer}.bias"] = np.float64(s.gate_bias)
    return out


def unpack_memory(tensors: dict, n_layers: int) -> list:
    out = []
    for layer in range(n_layers):
        try:
            out.append(MemorySlowWeights(
                w_phi=tensors[f"mem.{layer}.w_phi"],
                w_gate=tensors[f"mem.{layer}.w_g"],
                gate_bias=float(tensors[f"mem.{layer}.bias"])))
        except KeyError as missing:
            raise ValueError(f"checkpoint lacks memory tensor {missing}") from None
    return out
