"""Target classifier: training, frozen inference, and penultimate features.

The trained model is treated as frozen everywhere downstream; attack and
analysis code only reads probabilities and features from it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import LabeledImageSet
from .errors import DivergenceError


class SmallConvNet(nn.Module):
    """Desk-scale CNN: three conv blocks and two dense layers.

    The first dense layer (post-activation) is the addressable penultimate
    layer used for feature extraction.
    """

    def __init__(self, num_classes: int, input_shape: tuple[int, int, int] = (3, 32, 32),
                 width: int = 32, feature_dim: int = 256):
        super().__init__()
        c, h, w = input_shape
        self.input_shape = (c, h, w)
        self.features = nn.Sequential(
            nn.Conv2d(c, width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(2 * width, 4 * width, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        flat = 4 * width * (h // 8) * (w // 8)
        self.fc1 = nn.Linear(flat, feature_dim)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(feature_dim, num_classes)

    def penultimate(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x)
        return self.act(self.fc1(h.flatten(1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.penultimate(x))


ARCHS = {"smallcnn": SmallConvNet}


@dataclass
class TrainingConfig:
    epochs: int = 15
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 5e-4
    seed: int = 0
    device: str = "cpu"


@dataclass
class ClassifierModel:
    """A trained classifier plus the bookkeeping needed to reuse it."""

    net: nn.Module
    arch_id: str
    num_classes: int
    input_shape: tuple[int, int, int]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)


@dataclass(frozen=True)
class Predictions:
    """Softmax probability rows and their argmax labels (ties -> lowest index)."""

    probs: np.ndarray
    top_labels: np.ndarray

    def __len__(self) -> int:
        return self.probs.shape[0]

    @property
    def num_classes(self) -> int:
        return self.probs.shape[1]


def to_tensor(arr: np.ndarray, dtype=np.float32) -> torch.Tensor:
    """Copying numpy-to-torch conversion; safe for the read-only batch arrays."""
    return torch.from_numpy(np.array(arr, dtype=dtype, copy=True))


def _check_shape(model: ClassifierModel, images: np.ndarray) -> None:
    if tuple(images.shape[1:]) != tuple(model.input_shape):
        raise ValueError(
            f"image shape {tuple(images.shape[1:])} does not match model input "
            f"shape {tuple(model.input_shape)}"
        )


def _iter_batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield start, min(start + batch_size, n)


def build_arch(arch_id: str, num_classes: int,
               input_shape: tuple[int, int, int] = (3, 32, 32)) -> nn.Module:
    if arch_id not in ARCHS:
        raise ValueError(f"unknown architecture {arch_id!r}; known: {sorted(ARCHS)}")
    return ARCHS[arch_id](num_classes=num_classes, input_shape=input_shape)


def train_classifier(train_set: LabeledImageSet, arch_id: str = "smallcnn",
                     hyperparams: TrainingConfig | None = None,
                     eval_set: LabeledImageSet | None = None) -> ClassifierModel:
    """Train a classifier from scratch on the given set.

    Raises a coverage error when the training labels do not span all classes
    and aborts with DivergenceError if the loss becomes non-finite.
    """
    hp = hyperparams or TrainingConfig()
    covered = np.unique(train_set.labels)
    if covered.size != train_set.num_classes:
        raise ValueError(
            f"training labels cover {covered.size} of {train_set.num_classes} classes"
        )

    torch.manual_seed(hp.seed)
    net = build_arch(arch_id, train_set.num_classes, train_set.image_shape).to(hp.device)
    opt = torch.optim.Adam(net.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    images = to_tensor(train_set.images)
    labels = to_tensor(train_set.labels, dtype=np.int64)
    rng = np.random.default_rng(hp.seed)

    net.train()
    n = len(train_set)
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        for start, stop in _iter_batches(n, hp.batch_size):
            idx = order[start:stop]
            x = images[idx].to(hp.device)
            y = labels[idx].to(hp.device)
            opt.zero_grad()
            loss = nn.functional.cross_entropy(net(x), y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"classifier loss non-finite at epoch {epoch + 1}")
            loss.backward()
            opt.step()
    net.eval()

    model = ClassifierModel(
        net=net.cpu(),
        arch_id=arch_id,
        num_classes=train_set.num_classes,
        input_shape=train_set.image_shape,
        metadata={"seed": hp.seed, "epochs": hp.epochs},
    )
    model.metadata["train_accuracy"] = evaluate_topk_accuracy(model, train_set, 1)
    if eval_set is not None:
        model.metadata["test_accuracy"] = evaluate_topk_accuracy(model, eval_set, 1)
    return model


def predict_probs(model: ClassifierModel, images: LabeledImageSet | np.ndarray,
                  batch_size: int = 256) -> Predictions:
    """Softmax probabilities for a batch; the model is read-only here."""
    pixels = images.images if isinstance(images, LabeledImageSet) else np.asarray(images)
    _check_shape(model, pixels)
    model.net.eval()
    rows = []
    with torch.no_grad():
        for start, stop in _iter_batches(pixels.shape[0], batch_size):
            x = to_tensor(pixels[start:stop])
            rows.append(torch.softmax(model.net(x), dim=1).numpy())
    probs = np.concatenate(rows) if rows else np.zeros((0, model.num_classes), dtype=np.float32)
    return Predictions(probs=probs, top_labels=np.argmax(probs, axis=1))


def penultimate_features(model: ClassifierModel, images: LabeledImageSet | np.ndarray,
                         batch_size: int = 256) -> np.ndarray:
    """Activations of the layer immediately before the classification layer."""
    pixels = images.images if isinstance(images, LabeledImageSet) else np.asarray(images)
    _check_shape(model, pixels)
    if not hasattr(model.net, "penultimate"):
        raise ValueError(f"architecture {model.arch_id!r} exposes no penultimate layer")
    model.net.eval()
    rows = []
    with torch.no_grad():
        for start, stop in _iter_batches(pixels.shape[0], batch_size):
            x = to_tensor(pixels[start:stop])
            rows.append(model.net.penultimate(x).numpy())
    return np.concatenate(rows)


def least_likely_classes(probs_row: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k smallest probabilities, ascending, ties to the lowest index."""
    probs_row = np.asarray(probs_row)
    if probs_row.ndim != 1:
        raise ValueError("probs_row must be 1-D")
    if not 0 < k < probs_row.size:
        raise ValueError(f"k must satisfy 0 < k < num_classes, got k={k}")
    return np.argsort(probs_row, kind="stable")[:k]


def least_likely_targets(probs: np.ndarray, k: int = 2) -> np.ndarray:
    """Row-wise least_likely_classes for a probability matrix, shape (N, k)."""
    probs = np.asarray(probs)
    if not 0 < k < probs.shape[1]:
        raise ValueError(f"k must satisfy 0 < k < num_classes, got k={k}")
    return np.argsort(probs, axis=1, kind="stable")[:, :k]


def evaluate_topk_accuracy(model: ClassifierModel, image_set: LabeledImageSet, k: int) -> float:
    """Fraction of samples whose true label is among the k most probable classes."""
    if len(image_set) == 0:
        raise ValueError("cannot evaluate accuracy on an empty set")
    if k > model.num_classes:
        raise ValueError(f"k={k} exceeds num_classes={model.num_classes}")
    preds = predict_probs(model, image_set)
    topk = np.argsort(-preds.probs, axis=1, kind="stable")[:, :k]
    hits = (topk == image_set.labels[:, None]).any(axis=1)
    return float(hits.mean())


def save_classifier(model: ClassifierModel, path: str | Path) -> None:
    """Persist the checkpoint container: arch id, class count, weights, metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "classifier",
            "arch_id": model.arch_id,
            "num_classes": model.num_classes,
            "input_shape": tuple(model.input_shape),
            "state_dict": model.net.state_dict(),
            "metadata": model.metadata,
        },
        path,
    )


def load_classifier(path: str | Path) -> ClassifierModel:
    path = Path(path)
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    net = build_arch(blob["arch_id"], blob["num_classes"], tuple(blob["input_shape"]))
    net.load_state_dict(blob["state_dict"])
    return ClassifierModel(
        net=net,
        arch_id=blob["arch_id"],
        num_classes=blob["num_classes"],
        input_shape=tuple(blob["input_shape"]),
        metadata=dict(blob.get("metadata", {})),
    )


def file_fingerprint(path: str | Path) -> str:
    """SHA-256 of a checkpoint file; used to tie generators to their target."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def parameter_fingerprint(model: ClassifierModel) -> str:
    """SHA-256 over the model's parameter bytes, independent of any file."""
    digest = hashlib.sha256()
    for name, tensor in sorted(model.net.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()
