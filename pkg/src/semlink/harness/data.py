"""Dataset ingestion: CIFAR binary batches and the in-repo toy image generator."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..rng import DATA, RngStream

RECORD_BYTES = 3073
DATA_DIR_ENV = "SEMLINK_DATA_DIR"


class DatasetError(ValueError):
    pass


@dataclass
class DatasetRecord:
    label: int
    pixels: np.ndarray  # H x W x 3 in [0, 1]


def _decode_records(raw):
    recs = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = recs[:, 0]
    # 1024 R, 1024 G, 1024 B planes, each row-major 32x32
    pixels = recs[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return labels, pixels


def load_cifar_binary(path):
    """Yield :class:`DatasetRecord` for each 3073-byte record of a CIFAR binary file."""
    size = os.path.getsize(path)
    if size % RECORD_BYTES:
        raise DatasetError(f"{path}: size {size} is not a multiple of {RECORD_BYTES} (truncated?)")
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(RECORD_BYTES * 256)
            if not chunk:
                return
            if len(chunk) % RECORD_BYTES:
                raise DatasetError(f"{path}: truncated record")
            labels, pixels = _decode_records(chunk)
            for lab, pix in zip(labels, pixels):
                yield DatasetRecord(int(lab), pix.astype(np.float32) / 255.0)


def load_cifar_array(path, limit=None, dtype=np.float32):
    """Whole file as an ``(N, 32, 32, 3)`` array in ``[0, 1]``."""
    size = os.path.getsize(path)
    if size % RECORD_BYTES:
        raise DatasetError(f"{path}: size {size} is not a multiple of {RECORD_BYTES} (truncated?)")
    with open(path, "rb") as fh:
        raw = fh.read(RECORD_BYTES * limit if limit else -1)
    _, pixels = _decode_records(raw)
    return pixels.astype(dtype) / 255.0


def find_cifar(split="test"):
    """Locate a CIFAR-10 binary batch under ``$SEMLINK_DATA_DIR``; None if absent."""
    root = os.environ.get(DATA_DIR_ENV)
    if not root:
        return None
    name = "test_batch.bin" if split == "test" else "data_batch_1.bin"
    for cand in (Path(root) / name, Path(root) / "cifar-10-batches-bin" / name):
        if cand.is_file():
            return cand
    return None


def _blur(img, sigma):
    r = max(1, int(3 * sigma))
    ax = np.arange(-r, r + 1)
    g = np.exp(-(ax**2) / (2 * sigma**2))
    g /= g.sum()
    pad = np.pad(img, ((r, r), (r, r), (0, 0)), mode="wrap")
    h, w = img.shape[:2]
    tmp = sum(g[i] * pad[i:i + h, :, :] for i in range(g.size))
    return sum(g[j] * tmp[:, j:j + w, :] for j in range(g.size))


def toy_images(n, size=8, seed=0, dtype=np.float32):
    """Synthetic colour images: blurred random textures overlaid with shapes.

    Deterministic given ``(n, size, seed)``; values lie in ``[0, 1]``.
    """
    gen = RngStream(seed, DATA).generator("toy", size)
    out = np.empty((n, size, size, 3))
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    for k in range(n):
        base = gen.uniform(0.2, 0.8, 3)
        grad = gen.normal(0, 0.25, (2, 3))
        img = base + xx[..., None] * grad[0] + yy[..., None] * grad[1]
        img = img + _blur(gen.normal(0, 0.35, (size, size, 3)), gen.uniform(0.6, 1.5))
        for _ in range(gen.integers(1, 3)):
            color = gen.uniform(0, 1, 3)
            if gen.random() < 0.5:
                r0, c0 = gen.integers(0, size - 2, 2)
                hh, ww = gen.integers(2, max(3, size // 2) + 1, 2)
                img[r0:r0 + hh, c0:c0 + ww] = color
            else:
                cy, cx = gen.uniform(0.2, 0.8, 2)
                rad = gen.uniform(0.15, 0.35)
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < rad**2
                img[mask] = color
        out[k] = img
    return np.clip(out, 0.0, 1.0).astype(dtype)


def toy_split(n_train=200, n_val=64, size=8, seed=0, dtype=np.float32):
    data = toy_images(n_train + n_val, size, seed, dtype)
    return data[:n_train], data[n_train:]
