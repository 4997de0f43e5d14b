"""Single-file checkpoint container.

Layout::

    b"DPCKPT01" | uint64 LE header length | header JSON (UTF-8) | array payload

The header holds ``schema_version``, the graph description, the config hash,
free-form ``meta`` and an index of arrays (name, shape, byte offset). Every
array is stored as little-endian float32 in index order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dualprune.nn.graph import NetworkGraph
from dualprune.nn.masked_bn import compute_mask

MAGIC = b"DPCKPT01"
SCHEMA_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    graph_desc: list[dict]
    config_hash: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def graph(self) -> NetworkGraph:
        return NetworkGraph.from_description(self.graph_desc, self.arrays)

    def check_config(self, config_hash: str) -> None:
        if config_hash != self.config_hash:
            raise CheckpointError(
                f"checkpoint was written with config hash {self.config_hash}, current config hashes to {config_hash}"
            )

    def save(self, path: str | Path) -> Path:
        index, blobs, offset = [], [], 0
        for name, arr in self.arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "schema_version": SCHEMA_VERSION,
            "graph": self.graph_desc,
            "config_hash": self.config_hash,
            "meta": self.meta,
            "arrays": index,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(hbytes)))
            fh.write(hbytes)
            for raw in blobs:
                fh.write(raw)
        return path


def from_graph(graph: NetworkGraph, config_hash: str, meta: dict | None = None, extra: dict | None = None) -> Checkpoint:
    arrays = {name: arr.copy() for name, arr in graph.named_arrays()}
    for node in graph.bn_nodes(masked_only=True):
        arrays[f"{node.id}.mask"] = compute_mask(node.bn)[0]
    arrays.update(extra or {})
    return Checkpoint(graph.describe(), config_hash, arrays, dict(meta or {}))


def save_checkpoint(path, graph: NetworkGraph, config_hash: str, meta=None, extra=None) -> Path:
    return from_graph(graph, config_hash, meta, extra).save(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    try:
        header = json.loads(blob[16 : 16 + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema_version {header.get('schema_version')}")
    base = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        if start + 4 * count > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(header["graph"], header["config_hash"], arrays, header.get("meta", {}))
