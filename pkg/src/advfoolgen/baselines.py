"""Reference gradient attacks: FGSM, its iterated form, and PGD.

All attacks perturb within an L-infinity ball around the source images, clip
back into [0,1], and use the true labels for the loss. The attacked model is
never modified.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .classifier import ClassifierModel, to_tensor
from .data import LabeledImageSet
from .generator import derive_seed


@dataclass(frozen=True)
class GradAttackConfig:
    """L-infinity budget and iteration schedule for the gradient attacks."""

    epsilon: float = 0.07
    steps: int = 10
    step_size: float | None = None
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.steps > 1 and self.epsilon > 0 and self.resolved_step_size <= 0:
            raise ValueError("step_size must be positive for multi-step attacks")

    @property
    def resolved_step_size(self) -> float:
        # paper-style budget only fixes epsilon; eps/4 over 10 steps is the default
        return self.step_size if self.step_size is not None else self.epsilon / 4.0


def _input_gradients(net: torch.nn.Module, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    x = x.clone().detach().requires_grad_(True)
    loss = torch.nn.functional.cross_entropy(net(x), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def signed_gradient_steps(net: torch.nn.Module, x0: torch.Tensor, y: torch.Tensor,
                          epsilon: float, steps: int, step_size: float,
                          start: torch.Tensor | None = None) -> torch.Tensor:
    """Shared iteration: signed-gradient ascent steps projected into the
    epsilon ball around x0 and into [0,1]. Only input gradients are taken, so
    the net's own parameter gradients are untouched."""
    was_training = net.training
    net.eval()
    x = x0.clone() if start is None else start.clone()
    for _ in range(steps):
        grad = _input_gradients(net, x, y)
        x = x + step_size * torch.sign(grad)
        x = torch.min(torch.max(x, x0 - epsilon), x0 + epsilon)
        x = torch.clamp(x, 0.0, 1.0)
    if was_training:
        net.train()
    return x.detach()


def _attack_core(model: ClassifierModel, batch: LabeledImageSet, epsilon: float,
                 steps: int, step_size: float, start: np.ndarray | None) -> np.ndarray:
    x0 = to_tensor(batch.images)
    y = to_tensor(batch.labels, dtype=np.int64)
    init = None if start is None else torch.from_numpy(np.asarray(start, dtype=np.float32))
    return signed_gradient_steps(model.net, x0, y, epsilon, steps, step_size, init).numpy()


def fgsm(model: ClassifierModel, batch: LabeledImageSet, epsilon: float) -> LabeledImageSet:
    """One signed-gradient step of size epsilon, clipped into [0,1]."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if tuple(batch.image_shape) != tuple(model.input_shape):
        raise ValueError(
            f"batch shape {batch.image_shape} does not match model input {model.input_shape}"
        )
    adv = _attack_core(model, batch, epsilon, steps=1, step_size=epsilon, start=None)
    return batch.replace_images(adv, f"fgsm@eps={epsilon:g}")


def iterated_fgsm(model: ClassifierModel, batch: LabeledImageSet,
                  cfg: GradAttackConfig) -> LabeledImageSet:
    """FGSM repeated cfg.steps times, re-projected into the epsilon ball each round."""
    if tuple(batch.image_shape) != tuple(model.input_shape):
        raise ValueError(
            f"batch shape {batch.image_shape} does not match model input {model.input_shape}"
        )
    adv = _attack_core(model, batch, cfg.epsilon, cfg.steps, cfg.resolved_step_size, start=None)
    return batch.replace_images(adv, f"ifgsm@eps={cfg.epsilon:g}")


def pgd(model: ClassifierModel, batch: LabeledImageSet, cfg: GradAttackConfig,
        seed: int = 0) -> LabeledImageSet:
    """Iterated FGSM from a uniform random point in the epsilon ball when
    cfg.random_start is set; identical to iterated_fgsm otherwise."""
    if tuple(batch.image_shape) != tuple(model.input_shape):
        raise ValueError(
            f"batch shape {batch.image_shape} does not match model input {model.input_shape}"
        )
    start = None
    if cfg.random_start:
        rng = np.random.default_rng(derive_seed(seed, "pgd-start"))
        delta = rng.uniform(-cfg.epsilon, cfg.epsilon, size=batch.images.shape)
        start = np.clip(batch.images + delta.astype(np.float32), 0.0, 1.0)
    adv = _attack_core(model, batch, cfg.epsilon, cfg.steps, cfg.resolved_step_size, start)
    return batch.replace_images(adv, f"pgd@eps={cfg.epsilon:g}")
