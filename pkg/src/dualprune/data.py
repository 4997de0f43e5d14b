"""Procedural denoising data: sums of Gaussian blobs plus additive noise."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FILES = ("train_noisy.npy", "train_clean.npy", "val_noisy.npy", "val_clean.npy")


@dataclass
class DenoisingData:
    train_noisy: np.ndarray
    train_clean: np.ndarray
    val_noisy: np.ndarray
    val_clean: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "train_noisy.npy": self.train_noisy,
            "train_clean.npy": self.train_clean,
            "val_noisy.npy": self.val_noisy,
            "val_clean.npy": self.val_clean,
        }


def blob_images(n: int, size: int, blob_count: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` single-channel images, each the sum of ``blob_count`` isotropic Gaussians."""
    centers = rng.uniform(0, size, size=(n, blob_count, 2))
    sigmas = rng.uniform(size / 16, size / 6, size=(n, blob_count))
    amps = rng.uniform(0.5, 1.0, size=(n, blob_count))
    coords = np.arange(size, dtype=np.float64) + 0.5
    dy = coords[None, None, :] - centers[..., 0, None]
    dx = coords[None, None, :] - centers[..., 1, None]
    gy = np.exp(-0.5 * (dy / sigmas[..., None]) ** 2)
    gx = np.exp(-0.5 * (dx / sigmas[..., None]) ** 2)
    img = np.einsum("nb,nbh,nbw->nhw", amps, gy, gx)
    return img[:, None].astype(np.float32)


def generate(
    n: int, size: int, blob_count: int = 3, noise_level: float = 0.1, val_size: int = 64, seed: int = 0
) -> DenoisingData:
    rng = np.random.default_rng(seed)
    clean = blob_images(n + val_size, size, blob_count, rng)
    noise = rng.standard_normal(clean.shape).astype(np.float32)
    noisy = clean + np.float32(noise_level) * noise if noise_level else clean.copy()
    return DenoisingData(noisy[:n], clean[:n], noisy[n:], clean[n:])


def checksum(data: DenoisingData) -> str:
    h = hashlib.sha256()
    for name, arr in data.arrays().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def save(data: DenoisingData, out_dir: Path, meta: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, arr in data.arrays().items():
        np.save(out_dir / name, np.ascontiguousarray(arr, dtype="<f4"), allow_pickle=False)
    info = dict(meta or {})
    info["checksum"] = checksum(data)
    info["shapes"] = {name: list(arr.shape) for name, arr in data.arrays().items()}
    (out_dir / "dataset.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    return out_dir


def load(out_dir: Path) -> DenoisingData:
    out_dir = Path(out_dir)
    missing = [f for f in FILES if not (out_dir / f).exists()]
    if missing:
        raise FileNotFoundError(f"dataset in {out_dir} is missing {missing}; run gen-data first")
    arrs = [np.load(out_dir / f, allow_pickle=False) for f in FILES]
    return DenoisingData(*arrs)


def iterate_batches(noisy: np.ndarray, clean: np.ndarray, batch_size: int, seed: int, epoch: int):
    """Shuffled mini-batches; the order depends only on ``(seed, epoch)``."""
    order = np.random.default_rng([seed, epoch]).permutation(len(noisy))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        yield noisy[idx], clean[idx]
