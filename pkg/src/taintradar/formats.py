"""Raw tensor (RT1) and PPM (P6) file formats.

RT1 layout: magic ``RT1\\n``, rank as unsigned 32-bit little-endian, each
dimension as unsigned 32-bit LE, then the payload as 32-bit LE IEEE-754
floats in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

RT1_MAGIC = b"RT1\n"


class FormatError(ValueError):
    """Malformed or truncated tensor/image file."""


def write_rt1(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(RT1_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        for dim in arr.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(arr.tobytes(order="C"))


def read_rt1(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RT1_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {RT1_MAGIC!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise FormatError(f"{path}: truncated header")
        (rank,) = struct.unpack("<I", raw)
        shape = []
        for _ in range(rank):
            raw = fh.read(4)
            if len(raw) != 4:
                raise FormatError(f"{path}: truncated dimension list")
            shape.append(struct.unpack("<I", raw)[0])
        count = int(np.prod(shape)) if shape else 1
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise FormatError(f"{path}: payload holds {len(payload) // 4} values, expected {count}")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def write_ppm(path, image) -> None:
    """Write a CHW float image in [0,1] as binary PPM (P6, maxval 255)."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = np.repeat(img[None], 3, axis=0)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"PPM export needs a 3xHxW image, got shape {img.shape}")
    data = (np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape[1], img.shape[2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.transpose(1, 2, 0).tobytes())


def _read_ppm_token(fh) -> bytes:
    # PPM headers allow '#' comments and arbitrary whitespace between tokens
    token = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise FormatError("truncated PPM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6) into a CHW float32 image in [0,1]."""
    with open(path, "rb") as fh:
        if fh.read(2) != b"P6":
            raise FormatError(f"{path}: not a binary PPM (P6) file")
        w = int(_read_ppm_token(fh))
        h = int(_read_ppm_token(fh))
        maxval = int(_read_ppm_token(fh))
        if maxval != 255:
            raise FormatError(f"{path}: unsupported maxval {maxval}")
        payload = fh.read(3 * w * h)
        if len(payload) != 3 * w * h:
            raise FormatError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1).astype(np.float32)) / 255.0


def load_image(path) -> np.ndarray:
    """Load an image from RT1 or PPM, keyed on the file's magic bytes."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == RT1_MAGIC:
        return read_rt1(path)
    if magic[:2] == b"P6":
        return read_ppm(path)
    raise FormatError(f"{path}: neither RT1 nor PPM (magic {magic!r})")


def dataset_dir_paths(directory) -> dict:
    d = Path(directory)
    return {
        "train_images": d / "train_images.rt1",
        "train_labels": d / "train_labels.rt1",
        "test_images": d / "test_images.rt1",
        "test_labels": d / "test_labels.rt1",
    }
