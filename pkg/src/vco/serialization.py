"""Bit-exact binary file formats.

Checkpoint container (magic ``VCO1``): a table of named array entries, each
written little-endian as

    u32 name length | name bytes (utf-8) | u8 dtype code | u8 rank |
    u32 dims[rank] | raw payload

Dtype codes: 0 = float32, 1 = int64, 2 = uint8 (raw bytes, e.g. embedded
JSON). The table is preceded by a u64 entry count.

Dataset file (magic ``VCD1``): fixed header
``u32 n_classes | u32 samples_per_class | u32 C | u32 H | u32 W |
u64 seed | u32 generator id`` followed by float32 images in [-1, 1] and an
int64 class-id array.
"""

from __future__ import annotations

import struct

import numpy as np

CHECKPOINT_MAGIC = b"VCO1"
DATASET_MAGIC = b"VCD1"

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.int64): 1, np.dtype(np.uint8): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def write_records(path, entries: dict[str, np.ndarray]) -> None:
    """Write named arrays as a VCO1 record table (sorted by name)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(entries)))
        for name in sorted(entries):
            arr = np.ascontiguousarray(entries[name])
            if arr.dtype not in _DTYPE_CODES:
                raise ValueError(f"unsupported dtype {arr.dtype} for entry {name!r}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_records(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (count,) = struct.unpack("<Q", fh.read(8))
        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            code, rank = struct.unpack("<BB", fh.read(2))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            dtype = _CODE_DTYPES[code]
            n = int(np.prod(dims)) if rank else 1
            raw = fh.read(n * dtype.itemsize)
            arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype)
            entries[name] = arr.reshape(dims)
        return entries


def write_dataset(path, images: np.ndarray, labels: np.ndarray,
                  n_classes: int, samples_per_class: int, seed: int,
                  generator_id: int) -> None:
    images = np.ascontiguousarray(images, dtype=np.float32)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    n, c, h, w = images.shape
    if n != n_classes * samples_per_class or n != labels.shape[0]:
        raise ValueError("image/label counts inconsistent with header")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<IIIII", n_classes, samples_per_class, c, h, w))
        fh.write(struct.pack("<Q", seed & 0xFFFFFFFFFFFFFFFF))
        fh.write(struct.pack("<I", generator_id))
        fh.write(images.astype("<f4").tobytes())
        fh.write(labels.astype("<i8").tobytes())


def read_dataset(path):
    """Returns (images (N,C,H,W) f32, labels (N,) i64, header dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        n_classes, spc, c, h, w = struct.unpack("<IIIII", fh.read(20))
        (seed,) = struct.unpack("<Q", fh.read(8))
        (gen_id,) = struct.unpack("<I", fh.read(4))
        n = n_classes * spc
        images = np.frombuffer(fh.read(n * c * h * w * 4), dtype="<f4")
        images = images.astype(np.float32).reshape(n, c, h, w)
        labels = np.frombuffer(fh.read(n * 8), dtype="<i8").astype(np.int64)
    header = {"n_classes": n_classes, "samples_per_class": spc,
              "channels": c, "height": h, "width": w,
              "seed": seed, "generator_id": gen_id}
    return images, labels, header
