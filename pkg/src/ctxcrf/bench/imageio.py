"""Binary PPM (P6) / PGM (P5) reading and writing, PNG when Pillow is around."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def _write_pnm(path: Path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr, dtype=np.uint8).tobytes())


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    out, i = [], 0
    while len(out) < count:
        while data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while data[i : i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while not data[j : j + 1].isspace():
            j += 1
        out.append(data[i:j])
        i = j
    return out, i + 1


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    (m, w, h, maxval), start = _tokens(data, 4)
    if m != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, got {m!r}")
    if int(maxval) != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    w, h = int(w), int(h)
    arr = np.frombuffer(data[start : start + w * h * channels], dtype=np.uint8)
    if arr.size != w * h * channels:
        raise ValueError(f"{path}: truncated pixel data")
    return arr.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def _png(path: Path) -> bool:
    return Path(path).suffix.lower() == ".png"


def write_rgb(path, image_hwc: np.ndarray) -> None:
    if _png(path):
        from PIL import Image

        Image.fromarray(np.asarray(image_hwc, dtype=np.uint8), "RGB").save(path)
    else:
        _write_pnm(Path(path), b"P6", image_hwc)


def read_rgb(path) -> np.ndarray:
    if _png(path):
        from PIL import Image

        return np.asarray(Image.open(path).convert("RGB"))
    return _read_pnm(Path(path), b"P6", 3)


def write_gray(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise ValueError("label maps must fit in 8 bits")
    if _png(path):
        from PIL import Image

        Image.fromarray(labels.astype(np.uint8), "L").save(path)
    else:
        _write_pnm(Path(path), b"P5", labels)


def read_gray(path) -> np.ndarray:
    if _png(path):
        from PIL import Image

        return np.asarray(Image.open(path).convert("L"))
    return _read_pnm(Path(path), b"P5", 1)
