"""Latent-sampling inpainter with discriminator-score selection.

The generator encodes the visible part of a face into a diagonal Gaussian over
a latent vector (the prior path). During training a second encoder reads the
hidden pixels and produces the posterior the decoder is trained on; the KL term
pulls the prior towards it. At inference each candidate decodes a different
seeded draw from the prior, is composited onto the known pixels, and is scored
by the discriminator.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint
from .errors import DataError, ShapeError
from .imaging import MaskedPair, as_image, as_mask, composite
from .tensors import images_to_tensor, seeded

log = logging.getLogger(__name__)


class FullMaskWarning(UserWarning):
    """Nothing is visible; completion relies on the latent prior alone."""


def _down(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True))


def _up(cin, cout):
    return nn.Sequential(
        nn.Upsample(scale_factor=2, mode="nearest"),
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.LeakyReLU(0.2, inplace=True),
    )


class _LatentEncoder(nn.Module):
    def __init__(self, cin, width, latent_dim):
        super().__init__()
        self.convs = nn.Sequential(_down(cin, width), _down(width, 2 * width), _down(2 * width, 4 * width))
        self.stats = nn.Linear(4 * width, 2 * latent_dim)

    def forward(self, x):
        skips = []
        h = x
        for layer in self.convs:
            h = layer(h)
            skips.append(h)
        mu, logvar = self.stats(h.mean(dim=(2, 3))).chunk(2, dim=1)
        return mu, logvar.clamp(-10.0, 10.0), skips


class Generator(nn.Module):
    def __init__(self, channels: int = 3, latent_dim: int = 64, width: int = 32):
        super().__init__()
        self.channels = channels
        self.latent_dim = latent_dim
        self.prior_net = _LatentEncoder(channels + 1, width, latent_dim)
        self.posterior_net = _LatentEncoder(channels + 1, width, latent_dim)
        self.inject = nn.Linear(latent_dim, 4 * width)
        self.up3 = _up(8 * width, 2 * width)
        self.up2 = _up(4 * width, width)
        self.up1 = _up(2 * width, width)
        self.out = nn.Conv2d(width + channels + 1, channels, 3, padding=1)

    @staticmethod
    def _check(x):
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ShapeError(f"inpainting needs sides divisible by 8, got {tuple(x.shape[2:])}")

    def prior(self, masked: torch.Tensor, mask: torch.Tensor):
        """``masked``: (B, C, H, W) image, ``mask``: (B, 1, H, W) with 1 = hidden."""
        self._check(masked)
        inp = torch.cat([masked * (1 - mask), mask], dim=1)
        mu, logvar, skips = self.prior_net(inp)
        return mu, logvar, (inp, skips)

    def posterior(self, hidden: torch.Tensor, mask: torch.Tensor):
        mu, logvar, _ = self.posterior_net(torch.cat([hidden * mask, mask], dim=1))
        return mu, logvar

    def decode(self, context, z: torch.Tensor) -> torch.Tensor:
        inp, (s1, s2, s3) = context
        lat = self.inject(z)[:, :, None, None].expand(-1, -1, s3.shape[2], s3.shape[3])
        h = self.up3(torch.cat([s3, lat], dim=1))
        h = self.up2(torch.cat([h, s2], dim=1))
        h = self.up1(torch.cat([h, s1], dim=1))
        return torch.sigmoid(self.out(torch.cat([h, inp], dim=1)))


class Discriminator(nn.Module):
    """Four strided conv layers; the patch map is averaged into one realism score."""

    def __init__(self, channels: int = 3, width: int = 32):
        super().__init__()
        self.net = nn.Sequential(
            _down(channels, width),
            _down(width, 2 * width),
            _down(2 * width, 4 * width),
            _down(4 * width, 4 * width),
            nn.Conv2d(4 * width, 1, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x).mean(dim=(1, 2, 3))


def gaussian_kl(mu_q, logvar_q, mu_p, logvar_p) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over latent dims."""
    return 0.5 * torch.sum(
        logvar_p - logvar_q + (logvar_q.exp() + (mu_q - mu_p) ** 2) / logvar_p.exp() - 1.0, dim=1
    )


def reconstruction_loss(output, ground_truth, hidden, mask) -> torch.Tensor:
    """L1 on the visible region against the ground truth plus L1 on the hole against the hidden pixels."""
    visible = F.l1_loss(output * (1 - mask), ground_truth * (1 - mask))
    hole = F.l1_loss(output * mask, hidden * mask)
    return visible + hole


@dataclass
class InpaintTrainConfig:
    epochs: int = 150
    batch_size: int = 8
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    image_size: int = 256
    latent_dim: int = 64
    width: int = 32
    lambda_rec: float = 10.0
    lambda_adv: float = 1.0
    lambda_kl: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.image_size, self.latent_dim, self.width) <= 0:
            raise ValueError("inpainter sizes and epochs must be positive")
        if min(self.learning_rate, self.lambda_rec, self.lambda_adv, self.lambda_kl) <= 0:
            raise ValueError("learning rate and loss weights must be positive")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")


@dataclass
class InpaintCandidate:
    image: np.ndarray
    score: float
    latent_seed: int


def select_best(candidates: list[InpaintCandidate]) -> np.ndarray:
    """Highest discriminator score; ties go to the smallest ``latent_seed``."""
    if not candidates:
        raise ValueError("no candidates to select from")
    return min(candidates, key=lambda c: (-c.score, c.latent_seed)).image


class Inpainter:
    """A generator/discriminator pair plus the config it was built with."""

    def __init__(self, generator: Generator, discriminator: Discriminator, config: InpaintTrainConfig | None = None):
        self.generator = generator.eval()
        self.discriminator = discriminator.eval()
        self.config = config or InpaintTrainConfig()

    @classmethod
    def build(cls, channels: int = 3, config: InpaintTrainConfig | None = None) -> "Inpainter":
        config = config or InpaintTrainConfig()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            gen = Generator(channels, config.latent_dim, config.width)
            disc = Discriminator(channels, config.width)
        return cls(gen, disc, config)

    @property
    def channels(self) -> int:
        return self.generator.channels

    def generate_candidates(self, masked, mask, k: int = 3, seed: int = 0) -> list[InpaintCandidate]:
        """``k`` composited completions; candidate ``i`` decodes the prior draw seeded with ``seed + i``."""
        if k < 1:
            raise ValueError("k must be at least 1")
        masked = as_image(masked)
        mask = as_mask(mask, masked.shape[:2])
        if masked.shape[2] != self.channels:
            raise ShapeError(f"inpainter expects {self.channels} channels, got {masked.shape[2]}")
        if mask.all():
            warnings.warn("mask hides every pixel; sampling from the latent prior alone", FullMaskWarning, stacklevel=2)
        x = images_to_tensor([masked])
        m = torch.from_numpy(mask.astype(np.float32))[None, None]
        out = []
        with torch.no_grad():
            mu, logvar, ctx = self.generator.prior(x, m)
            std = torch.exp(0.5 * logvar)
            for i in range(k):
                latent_seed = seed + i
                eps = torch.randn(mu.shape, generator=seeded(latent_seed))
                raw = self.generator.decode(ctx, mu + std * eps)[0].permute(1, 2, 0).numpy()
                img = composite(masked, raw, mask)
                score = float(self.discriminator(images_to_tensor([img]))[0])
                out.append(InpaintCandidate(img, score, latent_seed))
        return out

    def inpaint(self, masked, mask, k: int = 3, seed: int = 0) -> np.ndarray:
        return select_best(self.generate_candidates(masked, mask, k, seed))


def generate_candidates(inp: Inpainter, masked, mask, k: int = 3, seed: int = 0) -> list[InpaintCandidate]:
    return inp.generate_candidates(masked, mask, k, seed)


def inpaint(inp: Inpainter, masked, mask, k: int = 3, seed: int = 0) -> np.ndarray:
    return inp.inpaint(masked, mask, k, seed)


def _pair_tensors(pairs: list[MaskedPair], size: int):
    for i, p in enumerate(pairs):
        if p.ground_truth is None:
            raise DataError(f"training sample {i} has no ground truth image")
    masked = images_to_tensor([p.masked_image for p in pairs])
    truth = images_to_tensor([p.ground_truth for p in pairs])
    mask = torch.from_numpy(np.stack([p.mask for p in pairs]).astype(np.float32))[:, None]
    if masked.shape[2:] != (size, size):
        raise ShapeError(f"training images must be {size}x{size}, got {tuple(masked.shape[2:])}")
    return masked, truth, mask


def train_inpainter(pairs: list[MaskedPair], config: InpaintTrainConfig | None = None, inpainter: Inpainter | None = None):
    """Alternating hinge-GAN training; returns ``(inpainter, history)``.

    ``history`` holds per-epoch means of the generator, discriminator,
    reconstruction and KL losses.
    """
    config = config or InpaintTrainConfig()
    masked, truth, mask = _pair_tensors(pairs, config.image_size)
    inp = inpainter or Inpainter.build(masked.shape[1], config)
    gen, disc = inp.generator, inp.discriminator
    opt_cls = torch.optim.Adam if config.optimizer == "adam" else torch.optim.RAdam
    opt_g = opt_cls(gen.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = opt_cls(disc.parameters(), lr=config.learning_rate, betas=(0.5, 0.999))
    rng = seeded(config.seed)
    history = {"generator": [], "discriminator": [], "reconstruction": [], "kl": []}
    gen.train()
    disc.train()
    n = len(masked)
    for epoch in range(config.epochs):
        sums = dict.fromkeys(history, 0.0)
        order = torch.randperm(n, generator=rng)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            xm, xg, m = masked[idx], truth[idx], mask[idx]
            hidden = xg * m

            mu_p, lv_p, ctx = gen.prior(xm, m)
            mu_q, lv_q = gen.posterior(hidden, m)
            eps = torch.randn(mu_q.shape, generator=rng)
            out = gen.decode(ctx, mu_q + torch.exp(0.5 * lv_q) * eps)
            filled = out * m + xg * (1 - m)

            d_loss = F.relu(1.0 - disc(xg)).mean() + F.relu(1.0 + disc(filled.detach())).mean()
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            rec = reconstruction_loss(out, xg, hidden, m)
            kl = gaussian_kl(mu_q, lv_q, mu_p, lv_p).mean()
            g_loss = config.lambda_rec * rec - config.lambda_adv * disc(filled).mean() + config.lambda_kl * kl
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            w = len(idx)
            sums["generator"] += g_loss.item() * w
            sums["discriminator"] += d_loss.item() * w
            sums["reconstruction"] += rec.item() * w
            sums["kl"] += kl.item() * w
        for key in history:
            history[key].append(sums[key] / n)
        if (epoch + 1) % 25 == 0 or epoch + 1 == config.epochs:
            log.info(
                "inpainter epoch %d/%d rec %.4f kl %.4f d %.4f",
                epoch + 1, config.epochs, history["reconstruction"][-1], history["kl"][-1], history["discriminator"][-1],
            )
    gen.eval()
    disc.eval()
    inp.config = config
    return inp, history


def save_inpainter(inp: Inpainter, path) -> str:
    tensors = {f"generator.{k}": v for k, v in inp.generator.state_dict().items()}
    tensors.update({f"discriminator.{k}": v for k, v in inp.discriminator.state_dict().items()})
    meta = {"channels": inp.channels, "train_config": asdict(inp.config)}
    return checkpoint.save_container(path, "inpainter", meta, tensors)


def load_inpainter(path) -> Inpainter:
    c = checkpoint.load_container(path, "inpainter")
    config = InpaintTrainConfig(**c.config["train_config"])
    gen = Generator(c.config["channels"], config.latent_dim, config.width)
    disc = Discriminator(c.config["channels"], config.width)
    gen.load_state_dict({k[len("generator.") :]: v for k, v in c.tensors.items() if k.startswith("generator.")})
    disc.load_state_dict({k[len("discriminator.") :]: v for k, v in c.tensors.items() if k.startswith("discriminator.")})
    return Inpainter(gen, disc, config)
