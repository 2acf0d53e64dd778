"""Statistical tooling: feature-space projection, latent-parameter reduction,
Parzen-window density estimation, and cross-epoch divergence tables.

Density and divergence work is deliberately univariate: latent statistics are
reduced onto a single pooled principal component so every epoch is compared in
the same coordinate.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabeledImageSet, compose_input, make_noise_mask
from .generator import (AdvFoolGenerator, GeneratorCheckpoint, LatentStats, derive_seed,
                        encode)

DENSITY_FLOOR = 1e-12

_trapezoid = getattr(np, "trapezoid", None) or np.trapz
DEFAULT_GRID_POINTS = 512
DEFAULT_GRID_SPAN = 5.0


def _center(features: np.ndarray) -> np.ndarray:
    return features - features.mean(axis=0, keepdims=True)


def _principal_components(features: np.ndarray, k: int) -> np.ndarray:
    """Top-k principal axes (k, d) by SVD, each signed so its largest-magnitude
    loading is positive."""
    centered = _center(np.asarray(features, dtype=np.float64))
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    scale = np.linalg.norm(centered) + 1e-30
    if (svals > 1e-10 * scale).sum() < k:
        raise ValueError(f"feature covariance has rank below {k}")
    axes = vt[:k]
    for i in range(k):
        j = np.argmax(np.abs(axes[i]))
        if axes[i, j] < 0:
            axes[i] = -axes[i]
    return axes


def project_features_2d(features: np.ndarray) -> np.ndarray:
    """Scores on the top-2 principal components, ordered by descending variance."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] < 2 or features.shape[0] < 2:
        raise ValueError("need an (N >= 2, d >= 2) feature matrix")
    axes = _principal_components(features, 2)
    return _center(features) @ axes.T


def reduce_latent_stats(stats_per_epoch: list[LatentStats], field: str) -> list[np.ndarray]:
    """Project each epoch's latent statistics onto the first principal component
    of the pooled samples, so all epochs land in one comparable 1-D coordinate."""
    if field not in ("mu", "logvar"):
        raise ValueError(f"field must be 'mu' or 'logvar', got {field!r}")
    if not stats_per_epoch:
        raise ValueError("need at least one epoch of latent statistics")
    mats = [np.asarray(getattr(s, field).numpy(), dtype=np.float64) for s in stats_per_epoch]
    dims = {m.shape[1] for m in mats}
    if len(dims) != 1:
        raise ValueError(f"epochs disagree on latent dimension: {sorted(dims)}")
    pooled = np.concatenate(mats)
    axis = _principal_components(pooled, 1)[0]
    mean = pooled.mean(axis=0)
    return [(m - mean) @ axis for m in mats]


def parzen_density(samples: np.ndarray, h: float, grid: np.ndarray) -> "DensityEstimate":
    """Gaussian-kernel density estimate evaluated on the grid."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("cannot estimate a density from no samples")
    if h <= 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with at least 2 points")
    z = (grid[:, None] - samples[None, :]) / h
    density = np.exp(-0.5 * z**2).sum(axis=1) / (samples.size * h * np.sqrt(2.0 * np.pi))
    return DensityEstimate(samples=samples, bandwidth=float(h), grid=grid, density=density)


@dataclass(frozen=True)
class DensityEstimate:
    samples: np.ndarray
    bandwidth: float
    grid: np.ndarray
    density: np.ndarray

    def integral(self) -> float:
        return float(_trapezoid(self.density, self.grid))


def grid_search_bandwidth(samples: np.ndarray, candidates, folds: int = 5) -> float:
    """Bandwidth maximizing mean held-out log-likelihood under k-fold
    cross-validation; ties resolve to the smaller candidate."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    candidates = sorted(float(c) for c in candidates)
    if len(candidates) < 2:
        raise ValueError("need at least 2 bandwidth candidates")
    if any(c <= 0 for c in candidates):
        raise ValueError("bandwidth candidates must be positive")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if samples.size < 2 * folds:
        raise ValueError(
            f"{samples.size} samples are too few for {folds}-fold cross-validation"
        )

    fold_ids = np.arange(samples.size) % folds
    tiny = np.finfo(np.float64).tiny
    best_h, best_score = None, -np.inf
    for h in candidates:
        scores = []
        for f in range(folds):
            train = samples[fold_ids != f]
            held = samples[fold_ids == f]
            z = (held[:, None] - train[None, :]) / h
            dens = np.exp(-0.5 * z**2).sum(axis=1) / (train.size * h * np.sqrt(2.0 * np.pi))
            scores.append(np.log(np.maximum(dens, tiny)).mean())
        score = float(np.mean(scores))
        if score > best_score:
            best_h, best_score = h, score
    return best_h


def silverman_bandwidth(samples: np.ndarray) -> float:
    """1.06 * sigma * M^(-1/5); used to center default candidate grids."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    sigma = samples.std()
    return float(1.06 * sigma * samples.size ** (-0.2)) if sigma > 0 else 1.0


def default_bandwidth_candidates(samples: np.ndarray) -> list[float]:
    ref = max(silverman_bandwidth(samples), 1e-6)
    return [ref * f for f in (0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0)]


def kld_between_densities(p: DensityEstimate, q: DensityEstimate) -> float:
    """Trapezoidal approximation of KL(p || q) on the shared grid, floored at 0."""
    if p.grid.shape != q.grid.shape or not np.array_equal(p.grid, q.grid):
        raise ValueError("density estimates must share the same evaluation grid")
    ratio = np.zeros_like(p.density)
    mask = p.density > 0
    ratio[mask] = p.density[mask] * np.log(p.density[mask] / (q.density[mask] + DENSITY_FLOOR))
    return max(float(_trapezoid(ratio, p.grid)), 0.0)


@dataclass(frozen=True)
class DivergenceRow:
    epoch_a: int
    epoch_b: int
    stat: str
    kld_pq: float
    kld_qp: float


@dataclass(frozen=True)
class DivergenceTable:
    rows: tuple[DivergenceRow, ...]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch_a", "epoch_b", "stat", "kld_pq", "kld_qp"])
        for r in self.rows:
            writer.writerow([r.epoch_a, r.epoch_b, r.stat,
                             f"{r.kld_pq:.6e}", f"{r.kld_qp:.6e}"])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv())

    def select(self, stat: str) -> list[DivergenceRow]:
        return [r for r in self.rows if r.stat == stat]


def epoch_latent_stats(checkpoints: list[GeneratorCheckpoint], clean: LabeledImageSet,
                       seed: int = 0) -> dict[int, LatentStats]:
    """Encode the clean set under every checkpoint with one shared noise mask so
    differences reflect parameter drift only."""
    n, _, h, w = clean.images.shape
    stats = {}
    for ckpt in checkpoints:
        mask = make_noise_mask(n, h, w, ckpt.config.mgn, derive_seed(seed, "analysis-mask"))
        gen = AdvFoolGenerator.from_checkpoint(ckpt)
        stats[ckpt.epoch] = encode(gen, compose_input(clean, mask))
    return stats


def epoch_divergence_table(checkpoints: list[GeneratorCheckpoint], clean: LabeledImageSet,
                           reference_epoch: int, folds: int = 5,
                           grid_points: int = DEFAULT_GRID_POINTS,
                           span: float = DEFAULT_GRID_SPAN, seed: int = 0) -> DivergenceTable:
    """Both KLD directions between the reference epoch and every other epoch,
    for the reduced latent mean and variance statistics."""
    if len(checkpoints) < 2:
        raise ValueError("need at least 2 checkpoints")
    epochs = [c.epoch for c in checkpoints]
    if len(set(epochs)) != len(epochs):
        raise ValueError("checkpoint epochs must be distinct")
    if reference_epoch not in epochs:
        raise ValueError(f"reference epoch {reference_epoch} not among {sorted(epochs)}")

    ordered = sorted(checkpoints, key=lambda c: c.epoch)
    stats = epoch_latent_stats(ordered, clean, seed)
    rows = []
    for field, stat_name in (("mu", "mean"), ("logvar", "variance")):
        reduced = reduce_latent_stats([stats[c.epoch] for c in ordered], field)
        by_epoch = {c.epoch: r for c, r in zip(ordered, reduced)}
        pooled = np.concatenate(reduced)
        h = grid_search_bandwidth(pooled, default_bandwidth_candidates(pooled), folds)
        grid = np.linspace(pooled.min() - span * h, pooled.max() + span * h, grid_points)
        densities = {e: parzen_density(v, h, grid) for e, v in by_epoch.items()}
        ref = densities[reference_epoch]
        for epoch in sorted(by_epoch):
            if epoch == reference_epoch:
                continue
            rows.append(
                DivergenceRow(
                    epoch_a=reference_epoch,
                    epoch_b=epoch,
                    stat=stat_name,
                    kld_pq=kld_between_densities(ref, densities[epoch]),
                    kld_qp=kld_between_densities(densities[epoch], ref),
                )
            )
    return DivergenceTable(rows=tuple(rows))


def mean_pairwise_distance(points: np.ndarray) -> float:
    """Mean Euclidean distance over all unordered point pairs."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] < 2:
        raise ValueError("need at least two points")
    diff = points[:, None, :] - points[None, :, :]
    dists = np.sqrt((diff**2).sum(axis=-1))
    iu = np.triu_indices(points.shape[0], k=1)
    return float(dists[iu].mean())


def plot_densities(estimates: dict[int, DensityEstimate], stat_name: str,
                   path: str | Path) -> None:
    """PNG line chart of the per-epoch density estimates."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for epoch in sorted(estimates):
        est = estimates[epoch]
        ax.plot(est.grid, est.density, label=f"epoch {epoch}")
    ax.set_xlabel(f"reduced latent {stat_name}")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
