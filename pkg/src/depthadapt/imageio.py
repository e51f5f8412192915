"""Binary PPM (P6) and PFM readers/writers.

PPM stores RGB uint8 with header "P6\\n{W} {H}\\n255\\n" (quantization-only
loss). PFM stores float32 grayscale ("Pf") or RGB ("PF"), little-endian
(negative scale), rows bottom-up per the format; round-trips are bit-exact.
"""

from __future__ import annotations

import numpy as np


def write_ppm(path, img: np.ndarray) -> None:
    """img is (H, W, 3) float in [0, 1]."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w, _ = img.shape
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns (H, W, 3) float32 in [0, 1]."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError(f"not a binary PPM (magic {magic!r})")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline().strip())
        if maxval != 255:
            raise ValueError(f"unsupported maxval {maxval}")
        raw = f.read(w * h * 3)
        if len(raw) != w * h * 3:
            raise ValueError("truncated PPM payload")
    img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float32) / 255.0


def write_pfm(path, arr: np.ndarray) -> None:
    """arr is (H, W) or (H, W, 3) float32."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        magic, payload = b"Pf", arr
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, payload = b"PF", arr
    else:
        raise ValueError(f"unsupported PFM shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale: little-endian
        f.write(np.flipud(payload).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"Pf", b"PF"):
            raise ValueError(f"not a PFM file (magic {magic!r})")
        channels = 1 if magic == b"Pf" else 3
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        count = w * h * channels
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise ValueError("truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(raw, dtype=dtype).astype(np.float32)
    arr = arr.reshape((h, w) if channels == 1 else (h, w, 3))
    return np.flipud(arr).copy()
