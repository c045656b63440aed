"""Synthetic desk-scale datasets and file ingestion.

All kinds produce float32 images in [-1, 1], shape [count, channels, size,
size], deterministically from the descriptor (same descriptor, same
bytes). Synthetic kinds: soft Gaussian-blob scenes, dyadic checkerboards,
and band-limited sinusoid textures. File kinds: a directory of PNGs
(center-cropped and box-resized) or a .npy/.npz tensor.
"""

import os
from dataclasses import dataclass

import numpy as np

from .rng import Rng


@dataclass(frozen=True)
class DatasetDescriptor:
    kind: str = "gaussians"      # gaussians | checkerboard | textures | png_dir | tensor_file
    size: int = 16
    channels: int = 1
    count: int = 1024
    seed: int = 0
    num_classes: int = 0         # > 0 attaches uniform random labels
    path: str = ""               # png_dir / tensor_file source

    def __post_init__(self):
        kinds = ("gaussians", "checkerboard", "textures", "png_dir", "tensor_file")
        if self.kind not in kinds:
            raise ValueError(f"unknown dataset kind '{self.kind}', expected one of {kinds}")
        if self.kind in ("png_dir", "tensor_file") and not self.path:
            raise ValueError(f"dataset kind '{self.kind}' needs a path")

    def to_dict(self):
        return {"kind": self.kind, "size": self.size, "channels": self.channels,
                "count": self.count, "seed": self.seed,
                "num_classes": self.num_classes, "path": self.path}


def gen_dataset(desc: DatasetDescriptor):
    """Returns (images [N, C, S, S] float32 in [-1, 1], labels or None)."""
    rng = Rng(desc.seed).stream(f"dataset/{desc.kind}")
    if desc.kind == "gaussians":
        images = _gaussians(rng, desc)
    elif desc.kind == "checkerboard":
        images = _checkerboards(rng, desc)
    elif desc.kind == "textures":
        images = _textures(rng, desc)
    elif desc.kind == "png_dir":
        images = _load_png_dir(desc)
    else:
        images = _load_tensor_file(desc)
    labels = None
    if desc.num_classes > 0:
        labels = np.asarray(
            Rng(desc.seed).stream("dataset/labels").integers(0, desc.num_classes,
                                                             (len(images),)),
            dtype=np.intp)
    return images, labels


def _gaussians(rng, desc):
    """Signed soft blobs; amplitudes are budgeted so values stay in [-1, 1]."""
    s = desc.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    out = np.zeros((desc.count, desc.channels, s, s), dtype=np.float64)
    for i in range(desc.count):
        n_blobs = int(rng.integers(2, 5))
        amps = rng.uniform(0.3, 0.8, (n_blobs,))
        signs = np.where(rng.uniform(0, 1, (n_blobs,)) < 0.5, -1.0, 1.0)
        budget = np.abs(amps).sum()
        if budget > 1.0:
            amps = amps / budget
        img = np.zeros((s, s))
        for a, sign in zip(amps, signs):
            cy, cx = rng.uniform(0, s, (2,))
            sigma = rng.uniform(s / 16, s / 4)
            img += sign * a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        out[i] = img
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def _checkerboards(rng, desc):
    s = desc.size
    max_j = max(1, int(np.log2(s)) - 1)
    yy, xx = np.mgrid[0:s, 0:s]
    out = np.empty((desc.count, desc.channels, s, s), dtype=np.float32)
    for i in range(desc.count):
        period = 2 ** int(rng.integers(1, max_j + 1))
        oy, ox = (int(v) for v in rng.integers(0, period, (2,)))
        cell = (((yy + oy) // period) + ((xx + ox) // period)) % 2
        out[i] = np.where(cell == 0, -1.0, 1.0)
    return out


def _textures(rng, desc):
    s = desc.size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    out = np.zeros((desc.count, desc.channels, s, s), dtype=np.float64)
    fmax = max(1, s // 4)   # band-limited: no frequency above s/4
    for i in range(desc.count):
        n_waves = int(rng.integers(2, 5))
        amps = rng.uniform(0.3, 1.0, (n_waves,))
        img = np.zeros((s, s))
        for a in amps:
            fy, fx = (int(v) for v in rng.integers(-fmax, fmax + 1, (2,)))
            phase = rng.uniform(0, 2 * np.pi)
            img += a * np.sin(2 * np.pi * (fy * yy + fx * xx) / s + phase)
        out[i] = img / np.abs(amps).sum()
    return out.astype(np.float32)


def _load_png_dir(desc):
    from .images import load_png
    files = sorted(
        os.path.join(desc.path, f) for f in os.listdir(desc.path)
        if f.lower().endswith(".png"))
    if not files:
        raise FileNotFoundError(f"no PNG files under {desc.path}")
    if desc.count:
        files = files[: desc.count]
    out = np.empty((len(files), desc.channels, desc.size, desc.size),
                   dtype=np.float32)
    for i, path in enumerate(files):
        try:
            arr = load_png(path)     # [H, W, C] uint8
        except Exception as exc:
            raise IOError(f"unreadable image {path}: {exc}") from exc
        out[i] = _standardize(arr, desc.size, desc.channels, path)
    return out


def _standardize(arr, size, channels, path):
    """uint8 [H, W, C] -> float32 [C, size, size] in [-1, 1]."""
    h, w, c = arr.shape
    if channels == 1 and c == 3:
        arr = np.round(arr @ np.array([0.299, 0.587, 0.114]))[..., None]
    elif channels == 3 and c == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif c != channels:
        raise IOError(f"{path}: has {c} channels, dataset wants {channels}")
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    arr = arr[top: top + side, left: left + side].astype(np.float64)
    if side % size:
        raise IOError(f"{path}: crop side {side} not divisible by target {size} "
                      "(box-filter resize needs an integer factor)")
    f = side // size
    arr = arr.reshape(size, f, size, f, channels).mean(axis=(1, 3))
    return (arr / 127.5 - 1.0).transpose(2, 0, 1).astype(np.float32)


def _load_tensor_file(desc):
    data = np.load(desc.path)
    if hasattr(data, "files"):
        data = data[data.files[0]]
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 4 or data.shape[1] != desc.channels \
            or data.shape[2] != desc.size or data.shape[3] != desc.size:
        raise IOError(
            f"{desc.path}: expected [N, {desc.channels}, {desc.size}, {desc.size}], "
            f"got {data.shape}")
    if desc.count:
        data = data[: desc.count]
    return data
