"""Samples, the raw tensor file format, and dataset manifests.

Tensor file layout (little-endian)::

    8 bytes  magic   b"TNSRF32\\0" (float32 payload) or b"TNSRU8\\0\\0" (uint8 masks)
    4 bytes  rank    u32
    4*rank   extents u32 each
    payload  row-major values

A dataset manifest is JSON: ``{"samples": [{"id", "image", "label", "mask"}]}``
with paths relative to the manifest's directory; ``mask`` may be null.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetError

MAGIC_F32 = b"TNSRF32\x00"
MAGIC_U8 = b"TNSRU8\x00\x00"
_DTYPES = {MAGIC_F32: np.dtype("<f4"), MAGIC_U8: np.dtype("u1")}


@dataclass(eq=False)
class Sample:
    id: str
    image: np.ndarray
    label: int
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float32)
        if self.image.ndim != 3:
            raise DatasetError(f"sample {self.id!r}: image must be C x H x W, got {self.image.shape}", self.id)
        if self.mask is not None:
            self.mask = np.asarray(self.mask).astype(bool)
            if self.mask.shape != self.image.shape[1:]:
                raise DatasetError(
                    f"sample {self.id!r}: mask {self.mask.shape} does not match image {self.image.shape[1:]}",
                    self.id)


def encode_tensor(arr: np.ndarray, mask: bool = False) -> bytes:
    magic = MAGIC_U8 if mask else MAGIC_F32
    data = np.ascontiguousarray(arr, dtype=_DTYPES[magic])
    header = magic + struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape)
    return header + data.tobytes()


def decode_tensor(raw: bytes) -> np.ndarray:
    magic = raw[:8]
    if magic not in _DTYPES:
        raise ValueError(f"unknown tensor magic {magic!r}")
    if len(raw) < 12:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", raw, 8)
    end = 12 + 4 * rank
    if len(raw) < end:
        raise ValueError("truncated tensor header")
    shape = struct.unpack_from(f"<{rank}I", raw, 12)
    dtype = _DTYPES[magic]
    count = int(np.prod(shape)) if rank else 1
    if len(raw) != end + count * dtype.itemsize:
        raise ValueError(f"payload size {len(raw) - end} does not match shape {list(shape)}")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=end).reshape(shape)
    return arr.astype(np.float32 if magic == MAGIC_F32 else np.uint8)


def write_tensor(path, arr: np.ndarray, mask: bool = False) -> None:
    Path(path).write_bytes(encode_tensor(arr, mask))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def load_dataset(manifest_path) -> list[Sample]:
    """Read and validate every sample listed in a dataset manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    root = manifest_path.parent
    samples = []
    for entry in doc.get("samples", []):
        sid = str(entry.get("id"))
        try:
            image = read_tensor(root / entry["image"])
            mask = read_tensor(root / entry["mask"]) if entry.get("mask") else None
            label = int(entry["label"])
        except (OSError, KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"sample {sid!r}: {exc}", sid) from exc
        samples.append(Sample(sid, image, label, mask))
    return samples


def save_dataset(samples: Sequence[Sample], manifest_path) -> None:
    """Write tensors next to the manifest as ``<stem>.<id>.image.tnsr`` / ``.mask.tnsr``."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    stem = manifest_path.name.removesuffix(".json")
    entries = []
    for s in samples:
        image_name = f"{stem}.{s.id}.image.tnsr"
        write_tensor(root / image_name, s.image)
        mask_name = None
        if s.mask is not None:
            mask_name = f"{stem}.{s.id}.mask.tnsr"
            write_tensor(root / mask_name, s.mask, mask=True)
        entries.append({"id": s.id, "image": image_name, "label": int(s.label), "mask": mask_name})
    manifest_path.write_text(json.dumps({"samples": entries}, indent=2, sort_keys=True) + "\n")
