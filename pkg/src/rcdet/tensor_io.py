"""Flat-file tensor storage.

A ``.tsr`` file is a short text header followed by raw values:

    tsr 1
    name: cls_head.weight
    shape: 12 12 3 3
    dtype: float64
    <blank line>
    <little-endian float64 bytes, row-major>

Everything before the blank line is ASCII, one ``key: value`` per line, so
files stay inspectable with ``head``.  Grayscale images go out as binary
PGM (P5) for the same reason.
"""

from __future__ import annotations

import os

import numpy as np

_MAGIC = b"tsr 1\n"


def save_tensor(path: str | os.PathLike, array: np.ndarray, name: str = "") -> None:
    arr = np.asarray(array, dtype=np.float64)
    if "\n" in name:
        raise ValueError("tensor name must be a single line")
    header = _MAGIC
    header += f"name: {name}\n".encode()
    header += ("shape: " + " ".join(str(d) for d in arr.shape) + "\n").encode()
    header += b"dtype: float64\n\n"
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def load_tensor(path: str | os.PathLike) -> tuple[str, np.ndarray]:
    """Returns (name, array)."""
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(_MAGIC):
        raise ValueError(f"{path}: not a tsr file")
    end = blob.index(b"\n\n", len(_MAGIC) - 1)
    fields = {}
    for line in blob[len(_MAGIC):end].decode().splitlines():
        key, _, value = line.partition(": ")
        fields[key] = value
    if fields.get("dtype") != "float64":
        raise ValueError(f"{path}: unsupported dtype {fields.get('dtype')!r}")
    shape = tuple(int(t) for t in fields["shape"].split()) if fields["shape"] else ()
    raw = blob[end + 2:]
    n = int(np.prod(shape)) if shape else 1
    if len(raw) != 8 * n:
        raise ValueError(f"{path}: payload is {len(raw)} bytes, header implies {8 * n}")
    arr = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    return fields.get("name", ""), arr


def save_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as a binary (P5) portable graymap."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"PGM needs uint8 pixels, got {img.dtype}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(img.tobytes(order="C"))


def load_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(t) for t in parts[1].split())
    if parts[2] != b"255":
        raise ValueError(f"{path}: expected maxval 255, got {parts[2].decode()}")
    return np.frombuffer(parts[3][:w * h], dtype=np.uint8).reshape(h, w).copy()
