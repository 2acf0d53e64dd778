"""Dataset loading, noise masks, 4-channel composition, and image artifacts.

All image batches use a single canonical memory layout: float32 arrays of
shape (N, C, H, W) with values in the closed interval [0, 1].
"""

from __future__ import annotations

import os
import pickle
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import MissingDataError

CIFAR10_SUBDIR = "cifar-10-batches-py"
DATA_ROOT_ENV = "ADVFOOLGEN_DATA_ROOT"

# Image-set container layout (little-endian throughout):
#   magic b"AFIS" | u16 version | u16 provenance byte length | provenance utf-8
#   | u32 num_classes | u32 N | u32 C | u32 H | u32 W
#   | int64[N] labels | float32[N*C*H*W] pixel payload
SET_MAGIC = b"AFIS"
SET_VERSION = 1

SYNTHETIC_TRAIN_PER_CLASS = 800
SYNTHETIC_TEST_PER_CLASS = 200
_SYNTHETIC_CONTENT_SEED = {"train": 401, "test": 402}


def _as_readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LabeledImageSet:
    """Batch of 3-channel images in [0,1] with integer labels and a provenance tag."""

    images: np.ndarray
    labels: np.ndarray
    provenance: str
    num_classes: int

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {images.shape}")
        if images.shape[1] != 3:
            raise ValueError(f"image sets carry 3 channels, got {images.shape[1]}")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if labels.shape != (images.shape[0],):
            raise ValueError("labels must be 1-D with one entry per image")
        if self.num_classes <= 0:
            raise ValueError("num_classes must be positive")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        object.__setattr__(self, "images", _as_readonly(images))
        object.__setattr__(self, "labels", _as_readonly(labels))

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def replace_images(self, images: np.ndarray, provenance: str) -> "LabeledImageSet":
        """Same labels and class count, new pixels and provenance."""
        return LabeledImageSet(images, self.labels.copy(), provenance, self.num_classes)

    def take(self, indices: np.ndarray) -> "LabeledImageSet":
        return LabeledImageSet(
            self.images[indices], self.labels[indices], self.provenance, self.num_classes
        )


@dataclass(frozen=True)
class NoiseMask:
    """Single-channel uniform noise in [0, mgn], shape (N, 1, H, W)."""

    values: np.ndarray
    mgn: float

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 4 or values.shape[1] != 1:
            raise ValueError(f"mask must be (N, 1, H, W), got shape {values.shape}")
        if not 0.0 < self.mgn <= 1.0:
            raise ValueError(f"mgn must lie in (0, 1], got {self.mgn}")
        if values.size and (values.min() < 0.0 or values.max() > self.mgn):
            raise ValueError("mask values must lie in [0, mgn]")
        object.__setattr__(self, "values", _as_readonly(values))


@dataclass(frozen=True)
class GenInput:
    """Generator input: source image channels plus the noise channel, (N, 4, H, W)."""

    values: np.ndarray

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 4 or values.shape[1] != 4:
            raise ValueError(f"generator input must be (N, 4, H, W), got {values.shape}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ValueError("generator input values must lie in [0, 1]")
        object.__setattr__(self, "values", _as_readonly(values))


def make_noise_mask(n: int, h: int, w: int, mgn: float, seed: int) -> NoiseMask:
    """Draw an (n, 1, h, w) mask i.i.d. uniform on [0, mgn), reproducible from seed."""
    if not 0.0 < mgn <= 1.0:
        raise ValueError(f"mgn must lie in (0, 1], got {mgn}")
    rng = np.random.default_rng(seed)
    values = rng.random((n, 1, h, w), dtype=np.float32) * np.float32(mgn)
    return NoiseMask(values, mgn)


def compose_input(images: LabeledImageSet, mask: NoiseMask) -> GenInput:
    """Concatenate image channels and the noise channel along the channel axis."""
    n, _, h, w = images.images.shape
    if mask.values.shape != (n, 1, h, w):
        raise ValueError(
            f"mask shape {mask.values.shape} does not match images (N={n}, H={h}, W={w})"
        )
    return GenInput(np.concatenate([images.images, mask.values], axis=1))


def split_input(gen_input: GenInput) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of compose_input: (image channels, noise channel)."""
    return gen_input.values[:, :3].copy(), gen_input.values[:, 3:4].copy()


def quantize_to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [0,1] reals to uint8 via round(255*x) with halves rounded up."""
    return np.floor(values.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def save_image_grid(images: LabeledImageSet, rows: int, path: str | Path) -> None:
    """Render the batch as a rows x ceil(N/rows) PNG grid, padding with black tiles."""
    n = len(images)
    if n == 0:
        raise ValueError("cannot render a grid from an empty image set")
    if rows <= 0:
        raise ValueError("rows must be positive")
    cols = -(-n // rows)
    _, c, h, w = images.images.shape
    canvas = np.zeros((rows * h, cols * w, c), dtype=np.uint8)
    tiles = quantize_to_bytes(images.images).transpose(0, 2, 3, 1)
    for i in range(n):
        r, col = divmod(i, cols)
        canvas[r * h : (r + 1) * h, col * w : (col + 1) * w] = tiles[i]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas, mode="RGB").save(path, format="PNG")


def save_image_set(image_set: LabeledImageSet, path: str | Path) -> None:
    """Write the documented binary container (see module header for the layout)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    prov = image_set.provenance.encode("utf-8")
    n, c, h, w = image_set.images.shape
    with open(path, "wb") as f:
        f.write(SET_MAGIC)
        f.write(struct.pack("<HH", SET_VERSION, len(prov)))
        f.write(prov)
        f.write(struct.pack("<5I", image_set.num_classes, n, c, h, w))
        f.write(image_set.labels.astype("<i8").tobytes())
        f.write(image_set.images.astype("<f4").tobytes())


def load_image_set(path: str | Path) -> LabeledImageSet:
    """Read a container written by save_image_set."""
    path = Path(path)
    if not path.is_file():
        raise MissingDataError(f"image-set container not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SET_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {SET_MAGIC!r}")
        version, prov_len = struct.unpack("<HH", f.read(4))
        if version != SET_VERSION:
            raise ValueError(f"{path}: unsupported container version {version}")
        provenance = f.read(prov_len).decode("utf-8")
        num_classes, n, c, h, w = struct.unpack("<5I", f.read(20))
        labels = np.frombuffer(f.read(8 * n), dtype="<i8").astype(np.int64)
        images = np.frombuffer(f.read(4 * n * c * h * w), dtype="<f4")
    images = images.reshape(n, c, h, w).astype(np.float32)
    return LabeledImageSet(images, labels, provenance, num_classes)


def _balanced_subset(labels: np.ndarray, num_classes: int, subset_size: int, seed: int) -> np.ndarray:
    if subset_size % num_classes != 0:
        raise ValueError(
            f"subset_size {subset_size} is not divisible by num_classes {num_classes}"
        )
    per_class = subset_size // num_classes
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if pool.size < per_class:
            raise ValueError(
                f"class {c} has {pool.size} samples, fewer than the {per_class} requested"
            )
        chosen.append(rng.choice(pool, size=per_class, replace=False))
    return np.sort(np.concatenate(chosen))


def _read_cifar_batches(paths: list[Path]) -> tuple[np.ndarray, np.ndarray]:
    data, labels = [], []
    for p in paths:
        with open(p, "rb") as f:
            batch = pickle.load(f, encoding="bytes")
        data.append(np.asarray(batch[b"data"], dtype=np.uint8))
        labels.append(np.asarray(batch[b"labels"], dtype=np.int64))
    raw = np.concatenate(data).reshape(-1, 3, 32, 32)
    return raw.astype(np.float32) / 255.0, np.concatenate(labels)


def _load_cifar10(root: Path, split: str) -> tuple[np.ndarray, np.ndarray, int]:
    batch_dir = root / CIFAR10_SUBDIR
    if split == "train":
        paths = [batch_dir / f"data_batch_{i}" for i in range(1, 6)]
    else:
        paths = [batch_dir / "test_batch"]
    missing = [p for p in paths if not p.is_file()]
    if missing:
        raise MissingDataError(
            f"cifar10 batch files missing under {batch_dir}: "
            + ", ".join(p.name for p in missing)
        )
    images, labels = _read_cifar_batches(paths)
    return images, labels, 10


def _bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """Row-stochastic (dst, src) interpolation matrix for 1-D bilinear resize."""
    mat = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        pos = np.clip((i + 0.5) * scale - 0.5, 0.0, src - 1.0)
        lo = int(np.floor(pos))
        hi = min(lo + 1, src - 1)
        frac = pos - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


def synthesize_images(labels: np.ndarray, seed: int, h: int = 32, w: int = 32) -> np.ndarray:
    """Procedural 10-class stand-in images: smooth per-class color fields plus an
    oriented class stripe pattern, with per-sample phase, field, and pixel noise.

    Content is fully determined by (labels, seed); used when no real dataset is
    available and for offline tests.
    """
    n = len(labels)
    low = 8
    up_h = _bilinear_matrix(low, h)
    up_w = _bilinear_matrix(low, w)

    t_rng = np.random.default_rng(990001)
    templates = t_rng.normal(0.0, 1.0, (10, 3, low, low))
    freqs = 1.5 + 3.0 * t_rng.random(10)
    thetas = np.pi * t_rng.random(10)
    stripe_color = t_rng.normal(0.0, 1.0, (10, 3))
    stripe_color /= np.linalg.norm(stripe_color, axis=1, keepdims=True)

    rng = np.random.default_rng(seed)
    low_noise = rng.normal(0.0, 1.0, (n, 3, low, low))
    phases = rng.uniform(0.0, 2.0 * np.pi, n)
    pix_noise = rng.normal(0.0, 1.0, (n, 3, h, w))

    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    fields = templates[labels] * 0.16 + low_noise * 0.10
    smooth = np.einsum("ij,ncjk,lk->ncil", up_h, fields, up_w)

    lab = np.asarray(labels)
    proj = (np.cos(thetas[lab])[:, None, None] * xx + np.sin(thetas[lab])[:, None, None] * yy)
    stripes = np.sin(2.0 * np.pi * freqs[lab][:, None, None] / w * proj + phases[:, None, None])
    stripes = stripes[:, None, :, :] * stripe_color[lab][:, :, None, None] * 0.12

    images = 0.5 + smooth + stripes + 0.06 * pix_noise
    return np.clip(images, 0.0, 1.0).astype(np.float32)


_synthetic_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}


def _synthetic_split(split: str) -> tuple[np.ndarray, np.ndarray]:
    if split not in _synthetic_cache:
        per_class = SYNTHETIC_TRAIN_PER_CLASS if split == "train" else SYNTHETIC_TEST_PER_CLASS
        content_seed = _SYNTHETIC_CONTENT_SEED[split]
        labels = np.repeat(np.arange(10), per_class)
        order = np.random.default_rng(content_seed).permutation(labels.size)
        labels = labels[order]
        images = _as_readonly(synthesize_images(labels, content_seed + 7))
        _synthetic_cache[split] = (images, _as_readonly(labels))
    return _synthetic_cache[split]


def write_synthetic_cifar10(root: str | Path, train_per_class: int | None = None,
                            test_per_class: int | None = None, seed: int = 0) -> Path:
    """Materialize the synthetic stand-in in the genuine CIFAR-10 batch layout.

    Produces data_batch_1..5, test_batch, and batches.meta under
    root/cifar-10-batches-py so the regular cifar10 loader can consume it.
    """
    train_per_class = train_per_class or SYNTHETIC_TRAIN_PER_CLASS
    test_per_class = test_per_class or SYNTHETIC_TEST_PER_CLASS
    batch_dir = Path(root) / CIFAR10_SUBDIR
    batch_dir.mkdir(parents=True, exist_ok=True)

    def emit(path: Path, labels: np.ndarray, content_seed: int, tag: str) -> None:
        images = synthesize_images(labels, content_seed)
        payload = quantize_to_bytes(images).reshape(len(labels), -1)
        batch = {
            b"batch_label": tag.encode(),
            b"labels": [int(v) for v in labels],
            b"data": payload,
            b"filenames": [f"synthetic_{tag}_{i:05d}.png".encode() for i in range(len(labels))],
        }
        with open(path, "wb") as f:
            pickle.dump(batch, f)

    train_labels = np.repeat(np.arange(10), train_per_class)
    train_labels = train_labels[np.random.default_rng(seed).permutation(train_labels.size)]
    per_batch = -(-train_labels.size // 5)
    for i in range(5):
        chunk = train_labels[i * per_batch : (i + 1) * per_batch]
        emit(batch_dir / f"data_batch_{i + 1}", chunk, seed + 11 + i, f"training batch {i + 1} of 5")

    test_labels = np.repeat(np.arange(10), test_per_class)
    test_labels = test_labels[np.random.default_rng(seed + 5).permutation(test_labels.size)]
    emit(batch_dir / "test_batch", test_labels, seed + 99, "testing batch 1 of 1")

    meta = {
        b"label_names": [f"class_{i}".encode() for i in range(10)],
        b"num_cases_per_batch": per_batch,
        b"num_vis": 3072,
    }
    with open(batch_dir / "batches.meta", "wb") as f:
        pickle.dump(meta, f)
    return batch_dir


def resolve_data_root(data_root: str | Path | None) -> Path:
    if data_root is not None:
        return Path(data_root)
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def load_dataset(name: str, split: str, subset_size: int | None = None, seed: int = 0,
                 data_root: str | Path | None = None) -> LabeledImageSet:
    """Load a normalized dataset split, optionally as a class-balanced subset.

    Supported names: ``cifar10`` (standard python batch files under
    ``<data_root>/cifar-10-batches-py``), ``synthetic10`` (procedural stand-in,
    generated in memory), or any directory ``<data_root>/<name>`` holding
    ``train.afis``/``test.afis`` containers.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    root = resolve_data_root(data_root)

    if name == "cifar10":
        images, labels, num_classes = _load_cifar10(root, split)
    elif name == "synthetic10":
        images, labels = _synthetic_split(split)
        num_classes = 10
    else:
        container = root / name / f"{split}.afis"
        if not container.is_file():
            raise MissingDataError(f"no dataset {name!r}: expected container at {container}")
        loaded = load_image_set(container)
        images, labels, num_classes = loaded.images, loaded.labels, loaded.num_classes

    if subset_size is not None:
        if subset_size > len(labels):
            raise ValueError(f"subset_size {subset_size} exceeds split size {len(labels)}")
        idx = _balanced_subset(labels, num_classes, subset_size, seed)
        images, labels = images[idx], labels[idx]

    return LabeledImageSet(images, labels, "clean", num_classes)
