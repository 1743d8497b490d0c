"""On-disk model format: a JSON manifest plus a raw little-endian float32 blob.

Manifest layout (keys sorted, two-space indent, trailing newline)::

    {
      "blobs": {"<name>": {"length": <bytes>, "offset": <bytes>, "shape": [...]}},
      "format": "xaicanon-graph",
      "input": "<node id>",
      "nodes": [{"attrs": {...}, "group": null, "id": "...", "inputs": [...],
                 "kind": "...", "params": {"weight": "<blob name>"}}],
      "output": "<node id>",
      "version": 1
    }

Blob names are ``<node id>.<param name>`` and blobs are laid out in node order.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import BlobRangeError, DanglingReferenceError, GraphError, ManifestParseError
from .graph import CONCAT, LayerNode, ModelGraph, validate_graph

FORMAT = "xaicanon-graph"
VERSION = 1
_LE_F32 = np.dtype("<f4")


def save_model(graph: ModelGraph) -> tuple[bytes, bytes]:
    """Serialize ``graph`` to ``(manifest bytes, blob bytes)``; deterministic."""
    blobs: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    nodes = []
    for node in graph.nodes.values():
        refs = {}
        for pname in sorted(node.params):
            arr = node.params[pname]
            raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
            name = f"{node.id}.{pname}"
            blobs[name] = {"offset": offset, "length": len(raw), "shape": list(arr.shape)}
            chunks.append(raw)
            offset += len(raw)
            refs[pname] = name
        nodes.append({
            "id": node.id,
            "kind": node.kind,
            "inputs": list(node.inputs),
            "attrs": _plain(dict(node.attrs)),
            "group": node.group,
            "params": refs,
        })
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "input": graph.input_id,
        "output": graph.output_id,
        "nodes": nodes,
        "blobs": blobs,
    }
    text = json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
    return text.encode("utf-8"), b"".join(chunks)


def _plain(v):
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def loads_model(manifest: bytes | str, blob: bytes) -> ModelGraph:
    """Parse and fully validate a model from in-memory manifest and blob bytes."""
    try:
        doc = json.loads(manifest)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestParseError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise ManifestParseError(f"manifest format must be {FORMAT!r}")
    if doc.get("version") != VERSION:
        raise ManifestParseError(f"unsupported manifest version {doc.get('version')!r}")
    try:
        table = doc["blobs"]
        raw_nodes = doc["nodes"]
        input_id, output_id = doc["input"], doc["output"]
    except KeyError as exc:
        raise ManifestParseError(f"manifest missing key {exc}") from exc

    nodes = []
    for entry in raw_nodes:
        try:
            nid = entry["id"]
            params = {}
            for pname, bname in entry.get("params", {}).items():
                if bname not in table:
                    raise BlobRangeError(f"node {nid!r}: parameter {pname!r} references unknown blob {bname!r}", nid)
                params[pname] = _read_blob(blob, table[bname], nid, bname)
            nodes.append(LayerNode(
                id=nid,
                kind=entry["kind"],
                inputs=tuple(entry.get("inputs", ())),
                params=params,
                attrs=entry.get("attrs", {}),
                group=entry.get("group"),
            ))
        except (KeyError, TypeError) as exc:
            raise ManifestParseError(f"malformed node entry {entry!r}: {exc}") from exc

    ids = {n.id for n in nodes}
    if len(ids) != len(nodes):
        raise ManifestParseError("duplicate node ids in manifest")
    for n in nodes:
        for ref in n.inputs:
            if ref not in ids:
                raise DanglingReferenceError(f"node {n.id!r} references missing node {ref!r}", ref)
    for ref in (input_id, output_id):
        if ref not in ids:
            raise DanglingReferenceError(f"manifest references missing node {ref!r}", ref)
    graph = ModelGraph({n.id: n for n in nodes}, input_id, output_id)
    graph.topo_order()  # raises CycleError naming the nodes
    if any(n.kind == CONCAT and "widths" not in n.attrs for n in nodes):
        raise ManifestParseError("Concat node without a recorded 'widths' slice layout")
    problems = validate_graph(graph)
    if problems:
        raise GraphError("invalid graph: " + "; ".join(problems))
    return graph


def _read_blob(blob: bytes, entry: dict, nid: str, bname: str) -> np.ndarray:
    offset, length, shape = int(entry["offset"]), int(entry["length"]), tuple(entry["shape"])
    count = int(np.prod(shape)) if shape else 1
    if offset < 0 or length != 4 * count or offset + length > len(blob):
        raise BlobRangeError(
            f"node {nid!r}: blob {bname!r} (offset {offset}, length {length}, shape {list(shape)}) "
            f"out of range for a {len(blob)}-byte blob", nid)
    arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=offset).astype(np.float32)
    return arr.reshape(shape)


def load_model(manifest_path, blob_path) -> ModelGraph:
    return loads_model(Path(manifest_path).read_bytes(), Path(blob_path).read_bytes())


def write_model(graph: ModelGraph, manifest_path, blob_path) -> None:
    manifest, blob = save_model(graph)
    Path(manifest_path).write_bytes(manifest)
    Path(blob_path).write_bytes(blob)
