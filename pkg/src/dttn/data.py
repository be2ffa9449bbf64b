"""Dataset loading (IDX and CIFAR-10 binary), preprocessing and batching."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, FormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

DATASETS = ("mnist", "fashion-mnist", "cifar10")
AUGMENTS = ("none", "flip_crop")

# Widely published per-channel constants; callers may override.
NORM_STATS = {
    "mnist": ((0.1307,), (0.3081,)),
    "fashion-mnist": ((0.2860,), (0.3530,)),
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
}


@dataclass
class LabeledDataset:
    images: np.ndarray  # N x C x H x W float32
    labels: np.ndarray  # N int64
    name: str = ""
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()
    classes: int = 10
    augment: str = "none"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"images must be N x C x H x W, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise FormatError(f"labels outside 0..{self.classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "LabeledDataset":
        index = np.arange(len(self))[index] if isinstance(index, slice) else np.asarray(index)
        return replace(self, images=self.images[index], labels=self.labels[index])

    @property
    def fill_value(self) -> np.ndarray:
        """Per-channel value of a zero pixel after normalization."""
        C = self.images.shape[1]
        if not self.mean:
            return np.zeros(C, dtype=np.float32)
        return (-np.asarray(self.mean) / np.asarray(self.std)).astype(np.float32)


# --------------------------------------------------------------------------
# readers
# --------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _idx_payload(path, magic: int, ndim: int) -> tuple[tuple[int, ...], np.ndarray]:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)} (need {header} bytes)")
    got = struct.unpack_from(">I", raw, 0)[0]
    if got != magic:
        raise FormatError(f"{path}: bad magic 0x{got:08x} at byte offset 0 (expected 0x{magic:08x})")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise FormatError(f"{path}: truncated payload at byte offset {len(raw)} (expected {need} bytes)")
    if len(raw) > need:
        raise FormatError(f"{path}: {len(raw) - need} trailing bytes after byte offset {need}")
    return dims, np.frombuffer(raw, dtype=np.uint8, offset=header)


def load_idx(images_path, labels_path, name: str = "idx", classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    (n, h, w), pix = _idx_payload(images_path, IDX_IMAGES, 3)
    (nl,), lab = _idx_payload(labels_path, IDX_LABELS, 1)
    if n != nl:
        raise FormatError(f"{images_path} holds {n} images but {labels_path} holds {nl} labels")
    images = (pix.reshape(n, 1, h, w).astype(np.float32) / np.float32(255.0))
    labels = lab.astype(np.int64)
    if n and labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise FormatError(f"{labels_path}: label {labels[bad]} at byte offset {8 + bad} exceeds {classes - 1}")
    return LabeledDataset(images, labels, name=name, classes=classes)


def load_cifar10_files(paths, name: str = "cifar10") -> LabeledDataset:
    imgs, labs = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            whole = len(raw) - len(raw) % CIFAR_RECORD
            raise FormatError(f"{path}: partial record at byte offset {whole} (records are {CIFAR_RECORD} bytes)")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.nonzero(rec[:, 0] > 9)[0]
        if bad.size:
            raise FormatError(f"{path}: label {rec[bad[0], 0]} at byte offset {bad[0] * CIFAR_RECORD} exceeds 9")
        labs.append(rec[:, 0].astype(np.int64))
        imgs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255.0))
    return LabeledDataset(np.concatenate(imgs), np.concatenate(labs), name=name)


def load_cifar10(directory, split: str = "train") -> LabeledDataset:
    d = Path(directory)
    if (d / "cifar-10-batches-bin").is_dir():
        d = d / "cifar-10-batches-bin"
    names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    paths = [d / n for n in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing CIFAR-10 batch files: {', '.join(missing)}")
    return load_cifar10_files(paths, name=f"cifar10-{split}")


def _find_idx(d: Path, stem: str) -> Path:
    for cand in (d / stem, d / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no {stem}[.gz] under {d}")


def load_dataset(name: str, data_dir, split: str = "train") -> LabeledDataset:
    """Load ``mnist``, ``fashion-mnist`` or ``cifar10`` from ``data_dir``.

    Files are looked up in ``data_dir/<name>/`` first, then ``data_dir``.
    """
    if name not in DATASETS:
        raise ConfigurationError(f"unknown dataset {name!r}; choose from {DATASETS}")
    if split not in ("train", "test"):
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data directory {root} does not exist")
    d = root / name if (root / name).is_dir() else root
    if name == "cifar10":
        return load_cifar10(d, split)
    prefix = "train" if split == "train" else "t10k"
    return load_idx(_find_idx(d, f"{prefix}-images-idx3-ubyte"), _find_idx(d, f"{prefix}-labels-idx1-ubyte"),
                    name=f"{name}-{split}")


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------


def pad_to(images: np.ndarray, size: int, fill=0.0) -> np.ndarray:
    h, w = images.shape[2:]
    if size < h or size < w:
        raise ConfigurationError(f"target size {size} is smaller than source {h}x{w}")
    top, left = (size - h) // 2, (size - w) // 2
    out = np.empty(images.shape[:2] + (size, size), dtype=images.dtype)
    out[...] = np.asarray(fill, dtype=images.dtype).reshape(1, -1, 1, 1)
    out[:, :, top:top + h, left:left + w] = images
    return out


def prepare(ds: LabeledDataset, target_size: int = 32, mean=None, std=None, augment: str = "none") -> LabeledDataset:
    """Zero-pad to ``target_size`` and normalize per channel.

    ``mean``/``std`` default to the dataset's published constants (scalars
    are broadcast over channels).  Augmentation is only recorded here;
    :func:`batches` applies it per epoch.
    """
    if target_size % 32:
        raise ConfigurationError(f"target size must be divisible by 32, got {target_size}")
    if augment not in AUGMENTS:
        raise ConfigurationError(f"augment must be one of {AUGMENTS}, got {augment!r}")
    C = ds.images.shape[1]
    base = ds.name.split("-train")[0].split("-test")[0]
    dm, dsd = NORM_STATS.get(base, ((0.0,) * C, (1.0,) * C))
    mean = np.broadcast_to(np.asarray(dm if mean is None else mean, dtype=np.float64), (C,))
    std = np.broadcast_to(np.asarray(dsd if std is None else std, dtype=np.float64), (C,))
    if np.any(std <= 0):
        raise ConfigurationError("std must be positive")
    x = pad_to(ds.images, target_size)
    x = ((x - mean.reshape(1, C, 1, 1).astype(np.float32)) / std.reshape(1, C, 1, 1).astype(np.float32))
    return replace(ds, images=np.ascontiguousarray(x, dtype=np.float32), mean=tuple(map(float, mean)),
                   std=tuple(map(float, std)), augment=augment)


def denormalize(ds: LabeledDataset) -> np.ndarray:
    C = ds.images.shape[1]
    m = np.asarray(ds.mean or (0.0,) * C, dtype=np.float32).reshape(1, C, 1, 1)
    s = np.asarray(ds.std or (1.0,) * C, dtype=np.float32).reshape(1, C, 1, 1)
    return ds.images * s + m


def hflip(images: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(images[..., ::-1])


def flip_crop(images: np.ndarray, rng: np.random.Generator, pad: int = 4, fill=None, flip: bool = True) -> np.ndarray:
    """Random horizontal flip (p=0.5) then a random crop from a ``pad``-padded copy."""
    B, C, H, W = images.shape
    fill = np.zeros(C, dtype=images.dtype) if fill is None else fill
    if flip:
        mask = rng.random(B) < 0.5
        images = images.copy()
        images[mask] = images[mask][..., ::-1]
    padded = pad_to(images, H + 2 * pad, fill) if H == W else None
    if padded is None:
        raise ConfigurationError("flip_crop expects square images")
    dy = rng.integers(0, 2 * pad + 1, B)
    dx = rng.integers(0, 2 * pad + 1, B)
    out = np.empty_like(images)
    for i in range(B):
        out[i] = padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W]
    return out


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(ds: LabeledDataset, batch_size: int, shuffle: bool = True, seed: int = 0,
            epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images, labels)`` in a deterministic order for ``(seed, epoch)``.

    The final partial batch is included.  With ``flip_crop`` augmentation
    digits (``mnist*``) are only cropped, never mirrored.
    """
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    n = len(ds)
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    aug_rng = np.random.default_rng([seed, epoch, 1]) if ds.augment == "flip_crop" else None
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx]
        if aug_rng is not None:
            x = flip_crop(x, aug_rng, fill=ds.fill_value, flip=not ds.name.startswith("mnist"))
        yield x, ds.labels[idx]
