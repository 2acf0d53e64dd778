"""Defense suite: retraining strategies, adversarial training, and
input-transformation retraining.

Retraining is from scratch by default. Transform defenses record their exact
configuration in the returned model's metadata so evaluation applies the same
transform (train/serve symmetry).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image

from .baselines import GradAttackConfig, signed_gradient_steps
from .classifier import (ClassifierModel, Predictions, TrainingConfig, build_arch,
                         evaluate_topk_accuracy, predict_probs, to_tensor)
from .data import LabeledImageSet, quantize_to_bytes
from .errors import DivergenceError
from .generator import derive_seed

RETRAIN_STRATEGIES = ("original_labels", "parallel_classes", "extra_class")

# pinned codec settings; varying them would break run-to-run comparability
JPEG_SUBSAMPLING = "4:2:0"


@dataclass(frozen=True)
class RetrainStrategy:
    """Label mapping used when attack images join the training set."""

    kind: str

    def __post_init__(self):
        if self.kind not in RETRAIN_STRATEGIES:
            raise ValueError(
                f"unknown retrain strategy {self.kind!r}; known: {RETRAIN_STRATEGIES}"
            )

    def output_classes(self, num_classes: int) -> int:
        if self.kind == "parallel_classes":
            return 2 * num_classes
        if self.kind == "extra_class":
            return num_classes + 1
        return num_classes

    def map_adv_labels(self, labels: np.ndarray, num_classes: int) -> np.ndarray:
        if self.kind == "parallel_classes":
            return labels + num_classes
        if self.kind == "extra_class":
            return np.full_like(labels, num_classes)
        return labels.copy()


@dataclass(frozen=True)
class TransformSpec:
    """Input transformation: bit-depth quantization or JPEG round-trip."""

    kind: str
    bits: int | None = None
    quality: int | None = None

    def __post_init__(self):
        if self.kind == "bit_depth":
            if self.bits is None or self.quality is not None:
                raise ValueError("bit_depth transform takes exactly the bits field")
            if not 1 <= self.bits <= 8:
                raise ValueError(f"bits must lie in [1, 8], got {self.bits}")
        elif self.kind == "jpeg":
            if self.quality is None or self.bits is not None:
                raise ValueError("jpeg transform takes exactly the quality field")
            if not 1 <= self.quality <= 100:
                raise ValueError(f"quality must lie in [1, 100], got {self.quality}")
        else:
            raise ValueError(f"unknown transform kind {self.kind!r}")

    @property
    def tag(self) -> str:
        return f"bdr{self.bits}" if self.kind == "bit_depth" else f"jpeg{self.quality}"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "bits": self.bits, "quality": self.quality}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(kind=d["kind"], bits=d.get("bits"), quality=d.get("quality"))


def bit_depth_reduce(images: np.ndarray, bits: int) -> np.ndarray:
    """Quantize pixels to 2**bits uniform levels in [0,1]; idempotent.

    Uses round-half-up so the result matches the per-level quantizer exactly.
    """
    if not 1 <= int(bits) <= 8:
        raise ValueError(f"bits must lie in [1, 8], got {bits}")
    levels = float(2 ** int(bits) - 1)
    out = np.floor(np.asarray(images, dtype=np.float64) * levels + 0.5) / levels
    return out.astype(np.float32)


def jpeg_compress(images: np.ndarray, quality: int) -> np.ndarray:
    """Encode each image as a baseline JPEG at the given quality and decode back."""
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"quality must lie in [1, 100], got {quality}")
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) images, got {images.shape}")
    out = np.empty_like(images)
    as_bytes = quantize_to_bytes(images)
    for i in range(images.shape[0]):
        try:
            buf = io.BytesIO()
            Image.fromarray(as_bytes[i].transpose(1, 2, 0), mode="RGB").save(
                buf, format="JPEG", quality=int(quality), subsampling=JPEG_SUBSAMPLING
            )
            buf.seek(0)
            decoded = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32)
        except Exception as exc:
            raise RuntimeError(f"jpeg codec failed on image {i}: {exc}") from exc
        out[i] = decoded.transpose(2, 0, 1) / 255.0
    return out


def apply_transform(images: LabeledImageSet, spec: TransformSpec) -> LabeledImageSet:
    if spec.kind == "bit_depth":
        pixels = bit_depth_reduce(images.images, spec.bits)
    else:
        pixels = jpeg_compress(images.images, spec.quality)
    return images.replace_images(pixels, f"{images.provenance}+{spec.tag}")


def _merge_for_retraining(clean: LabeledImageSet, adv: LabeledImageSet,
                          strategy: RetrainStrategy) -> LabeledImageSet:
    if adv.provenance == "clean":
        raise ValueError("adv set must carry an attack provenance tag")
    if not adv.provenance.startswith("advfool") and strategy.kind != "original_labels":
        raise ValueError(
            f"strategy {strategy.kind!r} applies to attack-generator images only; "
            f"{adv.provenance!r} supports original_labels"
        )
    if clean.num_classes != adv.num_classes:
        raise ValueError("clean and adv sets disagree on num_classes")
    out_classes = strategy.output_classes(clean.num_classes)
    images = np.concatenate([clean.images, adv.images])
    labels = np.concatenate(
        [clean.labels, strategy.map_adv_labels(adv.labels, clean.num_classes)]
    )
    return LabeledImageSet(images, labels, f"retrain[{strategy.kind}]<-{adv.provenance}",
                           out_classes)


def retrain_with_advfool(base_arch: str, clean: LabeledImageSet, adv: LabeledImageSet,
                         strategy: RetrainStrategy,
                         hyperparams: TrainingConfig | None = None) -> ClassifierModel:
    """Retrain from scratch on the clean/adversarial union under the strategy's
    label mapping; the output head is resized to the strategy's class count."""
    from .classifier import train_classifier

    merged = _merge_for_retraining(clean, adv, strategy)
    model = train_classifier(merged, base_arch, hyperparams)
    model.metadata.update(
        {
            "defense": "retrain",
            "strategy": strategy.kind,
            "adv_provenance": adv.provenance,
            "base_classes": clean.num_classes,
            "extra_class": clean.num_classes if strategy.kind == "extra_class" else None,
        }
    )
    return model


def adversarial_training(base_arch: str, clean: LabeledImageSet, attack_cfg: GradAttackConfig,
                         hyperparams: TrainingConfig | None = None,
                         mode: str = "replace") -> ClassifierModel:
    """Train with each batch replaced (or augmented) by PGD examples computed
    against the current model state."""
    if mode not in ("replace", "augment"):
        raise ValueError(f"mode must be 'replace' or 'augment', got {mode!r}")
    hp = hyperparams or TrainingConfig()
    covered = np.unique(clean.labels)
    if covered.size != clean.num_classes:
        raise ValueError(f"training labels cover {covered.size} of {clean.num_classes} classes")

    torch.manual_seed(hp.seed)
    net = build_arch(base_arch, clean.num_classes, clean.image_shape)
    opt = torch.optim.Adam(net.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    images = to_tensor(clean.images)
    labels = to_tensor(clean.labels, dtype=np.int64)
    rng = np.random.default_rng(derive_seed(hp.seed, "advtrain"))

    n = len(clean)
    net.train()
    for epoch in range(hp.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start : start + hp.batch_size]
            x, y = images[idx], labels[idx]
            init = None
            if attack_cfg.random_start and attack_cfg.epsilon > 0:
                delta = rng.uniform(-attack_cfg.epsilon, attack_cfg.epsilon, size=x.shape)
                init = torch.clamp(x + torch.from_numpy(delta.astype(np.float32)), 0.0, 1.0)
            x_adv = signed_gradient_steps(net, x, y, attack_cfg.epsilon, attack_cfg.steps,
                                          attack_cfg.resolved_step_size, init)
            if mode == "augment":
                x_adv = torch.cat([x, x_adv])
                y = torch.cat([y, y])
            opt.zero_grad()
            loss = torch.nn.functional.cross_entropy(net(x_adv), y)
            if not torch.isfinite(loss):
                raise DivergenceError(f"adversarial training diverged at epoch {epoch + 1}")
            loss.backward()
            opt.step()
    net.eval()

    model = ClassifierModel(net=net, arch_id=base_arch, num_classes=clean.num_classes,
                            input_shape=clean.image_shape,
                            metadata={"defense": "adv_training", "seed": hp.seed,
                                      "epochs": hp.epochs, "mode": mode,
                                      "attack": {"epsilon": attack_cfg.epsilon,
                                                 "steps": attack_cfg.steps,
                                                 "step_size": attack_cfg.resolved_step_size,
                                                 "random_start": attack_cfg.random_start}})
    model.metadata["train_accuracy"] = evaluate_topk_accuracy(model, clean, 1)
    return model


def transform_and_retrain(base_arch: str, clean: LabeledImageSet, adv: LabeledImageSet,
                          transform: TransformSpec, strategy: RetrainStrategy,
                          hyperparams: TrainingConfig | None = None) -> ClassifierModel:
    """Apply the transform to all training inputs, then retrain under the strategy.

    The transform is recorded in metadata and must be applied at evaluation
    time too; use defended_predict for that.
    """
    model = retrain_with_advfool(base_arch, apply_transform(clean, transform),
                                 apply_transform(adv, transform), strategy, hyperparams)
    model.metadata["defense"] = "transform_retrain"
    model.metadata["transform"] = transform.to_dict()
    return model


def model_transform(model: ClassifierModel) -> TransformSpec | None:
    spec = model.metadata.get("transform")
    return TransformSpec.from_dict(spec) if spec else None


def defended_predict(model: ClassifierModel, images: LabeledImageSet) -> Predictions:
    """Predict through the model's recorded input transform, if any."""
    spec = model_transform(model)
    if spec is not None:
        images = apply_transform(images, spec)
    return predict_probs(model, images)
