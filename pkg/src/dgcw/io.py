"""File formats: DGT1 tensors, checkpoint archives, PGM previews, CSV tables.

DGT1 layout: magic ``DGT1``, one dtype byte (0 = f32, 1 = f64), one rank
byte, rank little-endian u32 extents, then the row-major little-endian
payload.
"""

from __future__ import annotations

import json
import struct
import zipfile

import numpy as np

from .tensor import F32, F64, Tensor, name_from_dtype

MAGIC = b"DGT1"
_DTYPE_BYTE = {F32: 0, F64: 1}
_BYTE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def dgt_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _DTYPE_BYTE:
        raise TypeError(f"DGT1 stores f32/f64, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("rank exceeds one byte")
    head = MAGIC + bytes([_DTYPE_BYTE[arr.dtype], arr.ndim])
    head += b"".join(struct.pack("<I", e) for e in arr.shape)
    little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    return head + little.tobytes(order="C")


def dgt_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not a DGT1 blob (bad magic)")
    dtype_byte, rank = blob[4], blob[5]
    if dtype_byte not in _BYTE_DTYPE:
        raise ValueError(f"unknown dtype byte {dtype_byte}")
    extents = struct.unpack_from(f"<{rank}I", blob, 6)
    payload = blob[6 + 4 * rank:]
    dt = _BYTE_DTYPE[dtype_byte]
    count = int(np.prod(extents)) if rank else 1
    if len(payload) != count * dt.itemsize:
        raise ValueError("DGT1 payload length does not match extents")
    arr = np.frombuffer(payload, dtype=dt, count=count).reshape(extents)
    return arr.astype(dt.newbyteorder("="))


def write_dgt(path, arr: np.ndarray):
    with open(path, "wb") as f:
        f.write(dgt_bytes(arr))


def read_dgt(path) -> np.ndarray:
    with open(path, "rb") as f:
        return dgt_from_bytes(f.read())


# -- checkpoints ---------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamps keep archives byte-identical


def save_checkpoint(path, named_tensors, meta: dict):
    """Flat archive: ``params/<dotted.name>.dgt`` entries plus a manifest
    listing name, dtype and shape, plus free-form metadata."""
    entries = sorted(named_tensors.items())
    manifest = {
        "tensors": [
            {"name": n, "dtype": name_from_dtype(t.dtype), "shape": list(t.shape)}
            for n, t in entries
        ],
        "meta": meta,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(manifest, indent=1, sort_keys=True))
        for name, arr in entries:
            info = zipfile.ZipInfo(f"params/{name}.dgt", date_time=_EPOCH)
            zf.writestr(info, dgt_bytes(arr))


def load_checkpoint(path):
    """Returns (dict name -> ndarray, meta dict)."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        tensors = {}
        for rec in manifest["tensors"]:
            arr = dgt_from_bytes(zf.read(f"params/{rec['name']}.dgt"))
            if list(arr.shape) != rec["shape"]:
                raise ValueError(f"manifest/payload shape mismatch for {rec['name']}")
            tensors[rec["name"]] = arr
    return tensors, manifest.get("meta", {})


# -- small text artifacts --------------------------------------------------------


def write_pgm(path, labels: np.ndarray, class_count: int):
    """Binary PGM preview of an integer label map."""
    lab = np.asarray(labels)
    step = 255 // max(class_count - 1, 1)
    img = np.where(lab == 255, 255, lab * step).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes())


def write_csv(path, header, rows):
    """Deterministic CSV: fixed '%.*g' float formatting, newline-terminated."""
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)
