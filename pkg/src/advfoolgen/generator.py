"""The attack generator: encoder, reparameterized latent, decoder, critic,
the four loss terms, and the training/generation procedures.

The generator consumes a 4-channel input (source image plus a uniform noise
channel) and emits a 3-channel image in [0,1]; the target classifier stays
frozen throughout and only supplies probabilities for the fooling objective.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .classifier import (ClassifierModel, least_likely_targets, predict_probs,
                         to_tensor)
from .data import GenInput, LabeledImageSet, compose_input, make_noise_mask
from .errors import DivergenceError

LOG_EPS = 1e-12


def derive_seed(root: int, *parts) -> int:
    """Expand a root seed into an independent stream keyed by the given parts."""
    tag = "/".join(str(p) for p in parts).encode()
    h = int.from_bytes(hashlib.sha256(tag).digest()[:4], "little")
    return (int(root) ^ h) & 0x7FFFFFFF


@dataclass(frozen=True)
class LatentStats:
    """Per-sample diagonal-Gaussian parameters: mean and log-variance, (N, d)."""

    mu: torch.Tensor
    logvar: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise ValueError("mu and logvar must share a shape")
        if not (torch.isfinite(self.mu).all() and torch.isfinite(self.logvar).all()):
            raise ValueError("latent statistics must be finite")


@dataclass(frozen=True)
class LossWeights:
    """Convex weights for the four loss terms; must sum to 1."""

    alpha: float
    beta: float
    gamma: float
    lambda_: float

    def __post_init__(self):
        vals = (self.alpha, self.beta, self.gamma, self.lambda_)
        if any(v < 0 for v in vals):
            raise ValueError(f"loss weights must be non-negative, got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"loss weights must sum to 1, got {sum(vals)!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(alpha=d["alpha"], beta=d["beta"], gamma=d["gamma"], lambda_=d["lambda"])

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma,
                "lambda": self.lambda_}


@dataclass
class AttackConfig:
    """All generator hyperparameters; defaults target the desk-scale setup."""

    mgn: float = 0.1
    weights: LossWeights = field(default_factory=lambda: LossWeights(0.1, 0.3, 0.3, 0.3))
    latent_dim: int = 128
    epochs: int = 10
    d_steps_per_g: int = 5
    batch_size: int = 128
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    clip: float = 0.01
    seed: int = 0
    gan_loss_mode: str = "vanilla"
    save_every: int = 1
    base_channels: int = 32

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if not 0.0 < self.mgn <= 1.0:
            raise ValueError(f"mgn must lie in (0, 1], got {self.mgn}")
        if self.d_steps_per_g < 1:
            raise ValueError("d_steps_per_g must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.gan_loss_mode not in ("vanilla", "wasserstein"):
            raise ValueError(f"unknown gan_loss_mode {self.gan_loss_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        d["weights"] = LossWeights.from_dict(d["weights"])
        return cls(**d)


class Encoder(nn.Module):
    """4-channel image -> (mu, logvar) of the latent distribution."""

    def __init__(self, latent_dim: int, hw: int = 32, base: int = 32):
        super().__init__()
        if hw % 8 != 0:
            raise ValueError("spatial size must be divisible by 8")
        self.body = nn.Sequential(
            nn.Conv2d(4, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base, 2 * base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * base, 4 * base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.head = nn.Linear(4 * base * (hw // 8) ** 2, 2 * latent_dim)
        self.latent_dim = latent_dim

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.head(self.body(x).flatten(1))
        mu, logvar = h.chunk(2, dim=1)
        # keep exp(logvar) well-conditioned during optimization
        return mu, torch.clamp(logvar, min=-12.0, max=8.0)


class Decoder(nn.Module):
    """Latent sample -> 3-channel image in [0,1]; deliberately not the encoder's mirror."""

    def __init__(self, latent_dim: int, hw: int = 32, base: int = 32):
        super().__init__()
        if hw % 8 != 0:
            raise ValueError("spatial size must be divisible by 8")
        self.hw = hw
        self.base = base
        self.head = nn.Linear(latent_dim, 4 * base * (hw // 8) ** 2)
        self.body = nn.Sequential(
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(4 * base, 2 * base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(2 * base, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.ConvTranspose2d(base, 3, 4, stride=2, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h = self.head(z).view(z.shape[0], 4 * self.base, self.hw // 8, self.hw // 8)
        return self.body(h)


class Critic(nn.Module):
    """3-channel image -> raw real/fake score (sigmoid applied only in vanilla mode)."""

    def __init__(self, hw: int = 32, base: int = 32):
        super().__init__()
        if hw % 4 != 0:
            raise ValueError("spatial size must be divisible by 4")
        self.body = nn.Sequential(
            nn.Conv2d(3, base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(base, 2 * base, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Flatten(),
            nn.Linear(2 * base * (hw // 4) ** 2, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x).squeeze(1)


@dataclass
class GeneratorCheckpoint:
    """Frozen snapshot of the three networks at a named training epoch."""

    epoch: int
    encoder_state: dict
    decoder_state: dict
    critic_state: dict
    config: AttackConfig
    classifier_fingerprint: str
    image_hw: int = 32


class AdvFoolGenerator:
    """Runtime bundle of encoder/decoder/critic built from a config or checkpoint."""

    def __init__(self, config: AttackConfig, image_hw: int = 32):
        self.config = config
        self.image_hw = image_hw
        self.encoder = Encoder(config.latent_dim, image_hw, config.base_channels)
        self.decoder = Decoder(config.latent_dim, image_hw, config.base_channels)
        self.critic = Critic(image_hw, config.base_channels)

    @classmethod
    def from_checkpoint(cls, ckpt: GeneratorCheckpoint) -> "AdvFoolGenerator":
        gen = cls(ckpt.config, ckpt.image_hw)
        gen.encoder.load_state_dict(ckpt.encoder_state)
        gen.decoder.load_state_dict(ckpt.decoder_state)
        gen.critic.load_state_dict(ckpt.critic_state)
        gen.eval()
        return gen

    def snapshot(self, epoch: int, classifier_fingerprint: str) -> GeneratorCheckpoint:
        clone = lambda sd: {k: v.detach().clone() for k, v in sd.items()}
        return GeneratorCheckpoint(
            epoch=epoch,
            encoder_state=clone(self.encoder.state_dict()),
            decoder_state=clone(self.decoder.state_dict()),
            critic_state=clone(self.critic.state_dict()),
            config=self.config,
            classifier_fingerprint=classifier_fingerprint,
            image_hw=self.image_hw,
        )

    def eval(self) -> "AdvFoolGenerator":
        self.encoder.eval()
        self.decoder.eval()
        self.critic.eval()
        return self

    def g_parameters(self):
        yield from self.encoder.parameters()
        yield from self.decoder.parameters()


def encode(gen: AdvFoolGenerator, inputs: GenInput) -> LatentStats:
    """Latent parameters for a 4-channel batch; a pure function of weights and input."""
    values = inputs.values
    if values.shape[2] != gen.image_hw or values.shape[3] != gen.image_hw:
        raise ValueError(
            f"input spatial size {values.shape[2:]} does not match generator "
            f"size {gen.image_hw}"
        )
    with torch.no_grad():
        mu, logvar = gen.encoder(to_tensor(values))
    return LatentStats(mu=mu, logvar=logvar)


def reparameterize(stats: LatentStats, seed: int) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I), reproducible from seed."""
    rng = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(stats.mu.shape, generator=rng, dtype=stats.mu.dtype)
    return stats.mu + torch.exp(0.5 * stats.logvar) * eps


def decode(gen: AdvFoolGenerator, z: torch.Tensor | np.ndarray) -> np.ndarray:
    """Decode latent samples to 3-channel images; output bounded in [0,1]."""
    z = torch.as_tensor(z, dtype=torch.float32)
    if z.ndim != 2 or z.shape[1] != gen.config.latent_dim:
        raise ValueError(
            f"latent batch must be (N, {gen.config.latent_dim}), got {tuple(z.shape)}"
        )
    with torch.no_grad():
        out = gen.decoder(z)
    return out.numpy()


def discriminate(gen: AdvFoolGenerator, images: np.ndarray) -> np.ndarray:
    """Critic scores: probabilities in (0,1) in vanilla mode, raw reals in wasserstein."""
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ValueError(f"critic expects (N, 3, H, W), got {images.shape}")
    with torch.no_grad():
        raw = gen.critic(to_tensor(images))
        if gen.config.gan_loss_mode == "vanilla":
            raw = torch.sigmoid(raw)
    return raw.numpy()


def loss_resample(stats: LatentStats) -> torch.Tensor:
    """KL divergence of the learned diagonal Gaussian from N(0, I), batch mean."""
    per_sample = 0.5 * (stats.mu**2 + torch.exp(stats.logvar) - stats.logvar - 1.0).sum(dim=1)
    out = per_sample.mean()
    if not torch.isfinite(out):
        raise ValueError("loss_resample is non-finite; latent statistics overflow")
    return out


def loss_similarity(x_o: torch.Tensor | np.ndarray, x_af: torch.Tensor | np.ndarray) -> torch.Tensor:
    """Batch-mean Euclidean norm of the pixel difference between the two batches."""
    x_o = torch.as_tensor(x_o)
    x_af = torch.as_tensor(x_af)
    if x_o.shape != x_af.shape:
        raise ValueError(f"shape mismatch: {tuple(x_o.shape)} vs {tuple(x_af.shape)}")
    return (x_o - x_af).flatten(1).norm(dim=1).mean()


def _generator_gan_term(fake: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "vanilla":
        return -torch.log(fake.clamp(min=LOG_EPS)).mean()
    return -fake.mean()


def loss_gan(real_scores, fake_scores, mode: str = "vanilla") -> tuple[torch.Tensor, torch.Tensor]:
    """GAN terms for one batch of critic outputs.

    Vanilla mode takes probabilities: the first value is the discriminator
    objective mean(log real) + mean(log(1 - fake)) (to be maximized) and the
    second the non-saturating generator loss -mean(log fake) (to be minimized).
    Wasserstein mode takes raw scores: both values are losses to minimize,
    mean(fake) - mean(real) for the critic and -mean(fake) for the generator.
    Logarithm arguments are clamped at 1e-12.
    """
    real = torch.as_tensor(real_scores, dtype=torch.float32) \
        if not torch.is_tensor(real_scores) else real_scores
    fake = torch.as_tensor(fake_scores, dtype=torch.float32) \
        if not torch.is_tensor(fake_scores) else fake_scores
    if real.numel() == 0 or fake.numel() == 0:
        raise ValueError("score vectors must be non-empty")
    if mode == "vanilla":
        for name, s in (("real", real), ("fake", fake)):
            if s.min() < 0.0 or s.max() > 1.0:
                raise ValueError(f"vanilla {name} scores must be probabilities in (0, 1)")
        d_term = torch.log(real.clamp(min=LOG_EPS)).mean() \
            + torch.log((1.0 - fake).clamp(min=LOG_EPS)).mean()
    elif mode == "wasserstein":
        d_term = fake.mean() - real.mean()
    else:
        raise ValueError(f"unknown gan loss mode {mode!r}")
    return d_term, _generator_gan_term(fake, mode)


def loss_fool(probs, targets) -> torch.Tensor:
    """Summed cross-entropy pulling each sample toward its two target classes.

    probs: (N, C) probability rows; targets: (N, 2) distinct class indices per
    row. Probabilities are clamped at 1e-12 before the log.
    """
    probs = torch.as_tensor(probs) if not torch.is_tensor(probs) else probs
    targets = torch.as_tensor(np.asarray(targets), dtype=torch.long)
    if targets.ndim != 2 or targets.shape[0] != probs.shape[0]:
        raise ValueError("targets must be (N, k) aligned with probs rows")
    if targets.min() < 0 or targets.max() >= probs.shape[1]:
        raise ValueError("target class indices out of range")
    if (targets[:, :, None] == targets[:, None, :]).sum() != targets.shape[0] * targets.shape[1]:
        raise ValueError("target indices must be distinct within each row")
    picked = probs.gather(1, targets).clamp(min=LOG_EPS)
    return (-torch.log(picked)).sum(dim=1).mean()


def total_loss(weights: LossWeights, l_re, l_s, l_gan_g, l_af) -> torch.Tensor:
    """Convex combination of the four loss terms."""
    terms = [torch.as_tensor(t, dtype=torch.float32) if not torch.is_tensor(t) else t
             for t in (l_re, l_s, l_gan_g, l_af)]
    return (weights.alpha * terms[0] + weights.beta * terms[1]
            + weights.gamma * terms[2] + weights.lambda_ * terms[3])


def save_checkpoint(ckpt: GeneratorCheckpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "kind": "advfool-generator",
            "epoch": ckpt.epoch,
            "encoder": ckpt.encoder_state,
            "decoder": ckpt.decoder_state,
            "critic": ckpt.critic_state,
            "config": ckpt.config.to_dict(),
            "classifier_fingerprint": ckpt.classifier_fingerprint,
            "image_hw": ckpt.image_hw,
        },
        path,
    )


def load_checkpoint(path: str | Path) -> GeneratorCheckpoint:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("kind") != "advfool-generator":
        raise ValueError(f"{path} is not a generator checkpoint")
    return GeneratorCheckpoint(
        epoch=int(blob["epoch"]),
        encoder_state=blob["encoder"],
        decoder_state=blob["decoder"],
        critic_state=blob["critic"],
        config=AttackConfig.from_dict(blob["config"]),
        classifier_fingerprint=blob["classifier_fingerprint"],
        image_hw=int(blob.get("image_hw", 32)),
    )


def _forward_generator(gen: AdvFoolGenerator, x_i: torch.Tensor, eps: torch.Tensor):
    mu, logvar = gen.encoder(x_i)
    z = mu + torch.exp(0.5 * logvar) * eps
    return mu, logvar, gen.decoder(z)


def train_advfoolgen(config: AttackConfig, clean: LabeledImageSet, target: ClassifierModel,
                     checkpoint_dir: str | Path) -> list[GeneratorCheckpoint]:
    """Train the generator against a frozen classifier and persist epoch snapshots.

    Per batch: a fresh noise mask is composed with the source images, the
    critic takes config.d_steps_per_g updates, then the generator takes one
    update of the weighted total loss with per-sample fooling targets taken
    from the classifier's least likely classes on the clean images. A
    checkpoint is written every config.save_every epochs; a non-finite loss
    aborts the run with previously saved checkpoints left on disk.
    """
    checkpoint_dir = Path(checkpoint_dir)
    checkpoint_dir.mkdir(parents=True, exist_ok=True)
    n, _, h, w = clean.images.shape
    if h != w:
        raise ValueError("generator training expects square images")

    torch.manual_seed(derive_seed(config.seed, "init"))
    gen = AdvFoolGenerator(config, image_hw=h)
    opt_d = torch.optim.Adam(gen.critic.parameters(), lr=config.lr_d, betas=(0.5, 0.999))
    opt_g = torch.optim.Adam(gen.g_parameters(), lr=config.lr_g, betas=(0.5, 0.999))

    clf_fingerprint = _classifier_fingerprint(target)
    images = to_tensor(clean.images)
    order_rng = np.random.default_rng(derive_seed(config.seed, "order"))

    checkpoints: list[GeneratorCheckpoint] = []
    history = {"epochs": [], "d_updates": 0, "g_updates": 0}
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(n)
        sums = {"loss_resample": 0.0, "loss_similarity": 0.0, "loss_gan_g": 0.0,
                "loss_fool": 0.0, "total": 0.0, "d_term": 0.0}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x_o = images[idx]
            batch_set = clean.take(idx)
            mask = make_noise_mask(len(idx), h, w, config.mgn,
                                   derive_seed(config.seed, "mask", step))
            x_i = to_tensor(compose_input(batch_set, mask).values)

            clean_probs = predict_probs(target, batch_set).probs
            targets = to_tensor(least_likely_targets(clean_probs, 2), dtype=np.int64)

            eps_rng = torch.Generator().manual_seed(derive_seed(config.seed, "eps", step))
            eps_d = torch.randn(len(idx), config.latent_dim, generator=eps_rng)
            eps_g = torch.randn(len(idx), config.latent_dim, generator=eps_rng)

            with torch.no_grad():
                _, _, x_af_fixed = _forward_generator(gen, x_i, eps_d)

            for _ in range(config.d_steps_per_g):
                opt_d.zero_grad()
                real_raw = gen.critic(x_o)
                fake_raw = gen.critic(x_af_fixed)
                if config.gan_loss_mode == "vanilla":
                    d_term, _ = loss_gan(torch.sigmoid(real_raw), torch.sigmoid(fake_raw),
                                         "vanilla")
                    d_loss = -d_term
                else:
                    d_term, _ = loss_gan(real_raw, fake_raw, "wasserstein")
                    d_loss = d_term
                if not torch.isfinite(d_loss):
                    raise DivergenceError(f"critic loss non-finite at epoch {epoch}")
                d_loss.backward()
                opt_d.step()
                if config.gan_loss_mode == "wasserstein":
                    with torch.no_grad():
                        for p in gen.critic.parameters():
                            p.clamp_(-config.clip, config.clip)
                history["d_updates"] += 1

            opt_g.zero_grad()
            mu, logvar, x_af = _forward_generator(gen, x_i, eps_g)
            stats = LatentStats(mu=mu, logvar=logvar)
            l_re = loss_resample(stats)
            l_s = loss_similarity(x_o, x_af)
            fake_raw = gen.critic(x_af)
            if config.gan_loss_mode == "vanilla":
                l_gan_g = _generator_gan_term(torch.sigmoid(fake_raw), "vanilla")
            else:
                l_gan_g = _generator_gan_term(fake_raw, "wasserstein")
            probs_af = torch.softmax(target.net(x_af), dim=1)
            l_af = loss_fool(probs_af, targets)
            total = total_loss(config.weights, l_re, l_s, l_gan_g, l_af)
            if not torch.isfinite(total):
                raise DivergenceError(f"generator loss non-finite at epoch {epoch}")
            total.backward()
            opt_g.step()
            history["g_updates"] += 1

            sums["loss_resample"] += l_re.detach().item()
            sums["loss_similarity"] += l_s.detach().item()
            sums["loss_gan_g"] += l_gan_g.detach().item()
            sums["loss_fool"] += l_af.detach().item()
            sums["total"] += total.detach().item()
            sums["d_term"] += d_term.detach().item()
            batches += 1
            step += 1

        history["epochs"].append(
            {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        )
        if epoch % config.save_every == 0 or epoch == config.epochs:
            ckpt = gen.snapshot(epoch, clf_fingerprint)
            save_checkpoint(ckpt, checkpoint_dir / f"advfool_epoch_{epoch:04d}.pt")
            checkpoints.append(ckpt)

    with open(checkpoint_dir / "history.json", "w") as f:
        json.dump(history, f, indent=2)
    return checkpoints


def _classifier_fingerprint(target: ClassifierModel) -> str:
    from .classifier import parameter_fingerprint

    return parameter_fingerprint(target)


def generate_advfool(ckpt: GeneratorCheckpoint, clean: LabeledImageSet, seed: int) -> LabeledImageSet:
    """Generate attack images for a clean set: fresh test-time noise mask,
    encode -> re-sample -> decode, labels copied from the clean set."""
    n, _, h, w = clean.images.shape
    if h != ckpt.image_hw or w != ckpt.image_hw:
        raise ValueError(
            f"clean set spatial size {(h, w)} does not match checkpoint size {ckpt.image_hw}"
        )
    gen = AdvFoolGenerator.from_checkpoint(ckpt)
    mask = make_noise_mask(n, h, w, ckpt.config.mgn, derive_seed(seed, "test-mask"))
    stats = encode(gen, compose_input(clean, mask))
    z = reparameterize(stats, derive_seed(seed, "test-latent"))
    images = decode(gen, z)
    return LabeledImageSet(images, clean.labels.copy(),
                           f"advfool@epoch={ckpt.epoch}", clean.num_classes)
