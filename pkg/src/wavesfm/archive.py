"""Binary tensor files and sample archives.

A WFM1 file is: magic ``b"WFM1"``, uint32 dtype code (1 = float32,
2 = float64), uint32 rank, rank uint64 extents, then the row-major payload.
Everything is little-endian.  An archive is a directory of these files plus
``manifest.json`` describing each sample's metadata and, optionally, the
generator settings that produced it.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .pipeline import GridSample

MAGIC = b"WFM1"
_CODE_TO_DTYPE = {1: "<f4", 2: "<f8"}
_DTYPE_TO_CODE = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class CorruptTensorFile(ValueError):
    pass


def write_tensor(path, arr: np.ndarray):
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        arr = arr.astype(np.float32)
    code = _DTYPE_TO_CODE[arr.dtype]
    payload = np.ascontiguousarray(arr).astype(_CODE_TO_DTYPE[code]).tobytes()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(payload)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(4)
        if head != MAGIC:
            raise CorruptTensorFile(f"{path}: bad magic {head!r}")
        meta = f.read(8)
        if len(meta) != 8:
            raise CorruptTensorFile(f"{path}: truncated header")
        code, rank = struct.unpack("<II", meta)
        if code not in _CODE_TO_DTYPE:
            raise CorruptTensorFile(f"{path}: unknown dtype code {code}")
        ext = f.read(8 * rank)
        if len(ext) != 8 * rank:
            raise CorruptTensorFile(f"{path}: truncated extents")
        shape = struct.unpack(f"<{rank}Q", ext)
        dtype = np.dtype(_CODE_TO_DTYPE[code])
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = f.read(n * dtype.itemsize)
        if len(payload) != n * dtype.itemsize:
            raise CorruptTensorFile(f"{path}: truncated payload "
                                    f"({len(payload)} of {n * dtype.itemsize} bytes)")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    # native byte order, writable
    return arr.astype(dtype.newbyteorder("="), copy=True)


# -- sample archives ------------------------------------------------------------


def save_archive(dirpath, samples, meta: dict | None = None):
    """Write samples and a manifest into a directory; returns the path."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        sid = s.sample_id or f"sample{i:06d}"
        fname = f"{sid}.wfm1"
        write_tensor(d / fname, s.data)
        rec = {"sample_id": sid, "modality": s.modality, "file": fname}
        if s.label is not None:
            rec["label"] = int(s.label)
        if s.position is not None:
            rec["position"] = [float(v) for v in np.asarray(s.position)]
        if s.snr_db is not None:
            rec["snr_db"] = float(s.snr_db)
        records.append(rec)
    manifest = {"format": "wavesfm-archive", "version": 1, "samples": records}
    if meta:
        manifest["meta"] = meta
    with open(d / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1)
    return d


def load_archive(dirpath):
    """Read an archive directory back into (samples, meta)."""
    d = Path(dirpath)
    with open(d / "manifest.json") as f:
        manifest = json.load(f)
    if manifest.get("format") != "wavesfm-archive":
        raise ValueError(f"{d}: not a sample archive")
    samples = []
    for rec in manifest["samples"]:
        pos = rec.get("position")
        samples.append(GridSample(
            data=read_tensor(d / rec["file"]),
            modality=rec["modality"],
            label=rec.get("label"),
            position=None if pos is None else np.asarray(pos, dtype=np.float64),
            snr_db=rec.get("snr_db"),
            sample_id=rec["sample_id"],
        ))
    return samples, manifest.get("meta", {})
