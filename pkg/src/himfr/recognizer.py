"""Hybrid ViT identity classifier over a frozen CNN feature map.

Tokens are overlapping sliding windows of the backbone feature map, linearly
projected, prefixed with a class token and offset by learnable position
embeddings; a pre-norm transformer encoder and a softmax head follow.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import checkpoint, metrics
from .backbones import build_backbone, freeze, parse_backbone_spec, script_bytes
from .errors import ConfigurationError, DataError, ShapeError
from .tensors import images_to_tensor, seeded

log = logging.getLogger(__name__)


def patch_count(h: int, w: int, patch: int, stride: int) -> int:
    check_patching(h, w, patch, stride)
    return ((h - patch) // stride + 1) * ((w - patch) // stride + 1)


def check_patching(h: int, w: int, patch: int, stride: int) -> None:
    if patch < 1 or stride < 1:
        raise ConfigurationError("patch size and stride must be positive")
    if patch > h or patch > w:
        raise ConfigurationError(f"patch size {patch} exceeds feature map {h}x{w}")
    if (h - patch) % stride or (w - patch) % stride:
        raise ConfigurationError(f"stride {stride} does not tile a {h}x{w} map with {patch}x{patch} patches")


def make_patches(features: torch.Tensor, patch: int, stride: int) -> torch.Tensor:
    """Row-major sliding windows of a channel-last map.

    ``features`` is ``(h, w, c)`` or ``(B, h, w, c)``; the result is
    ``(N, P*P*c)`` or ``(B, N, P*P*c)`` with each window flattened as (row, col, channel).
    """
    feats = torch.as_tensor(features)
    single = feats.ndim == 3
    if single:
        feats = feats[None]
    if feats.ndim != 4:
        raise ShapeError(f"expected (h, w, c) or (B, h, w, c) features, got {tuple(feats.shape)}")
    b, h, w, c = feats.shape
    check_patching(h, w, patch, stride)
    win = feats.unfold(1, patch, stride).unfold(2, patch, stride)  # (B, nh, nw, c, P, P)
    out = win.permute(0, 1, 2, 4, 5, 3).reshape(b, -1, patch * patch * c)
    return out[0] if single else out


def encode_patches(patches: torch.Tensor, projection: torch.Tensor, position: torch.Tensor, class_token: torch.Tensor):
    """``concat(class_token, patches @ projection) + position`` for ``(B, N, L)`` patches."""
    if patches.shape[-1] != projection.shape[0]:
        raise ShapeError(f"patch length {patches.shape[-1]} does not match projection {tuple(projection.shape)}")
    n = patches.shape[-2]
    d = projection.shape[1]
    if position.shape != (n + 1, d) or class_token.shape != (d,):
        raise ShapeError(
            f"position must be ({n + 1}, {d}) and class token ({d},); got {tuple(position.shape)}, {tuple(class_token.shape)}"
        )
    tokens = patches @ projection
    cls = class_token.expand(*tokens.shape[:-2], 1, d)
    return torch.cat([cls, tokens], dim=-2) + position


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ConfigurationError(f"{heads} heads do not divide dimension {dim}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        weights = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d // self.heads), dim=-1)
        self.last_weights = weights.detach()
        out = (weights @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_dim), nn.GELU(), nn.Dropout(dropout), nn.Linear(mlp_dim, dim), nn.Dropout(dropout)
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        z = z + self.attn(self.norm1(z))
        return z + self.mlp(self.norm2(z))


def transformer_encode(z0: torch.Tensor, blocks, final_norm: nn.LayerNorm) -> torch.Tensor:
    """Run the encoder blocks and return ``LN(z_L[:, 0])``."""
    z = z0
    for blk in blocks:
        z = blk(z)
    return final_norm(z[..., 0, :])


def classify(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=-1)


@dataclass
class RecognizerConfig:
    num_classes: int = 5
    layers: int = 2
    heads: int = 8
    dim: int = 64
    mlp_ratio: int = 2
    patch: int = 2
    stride: int = 1
    grid: int = 14
    backbone: str = "toy:64"
    in_channels: int = 3
    input_size: int = 224
    epochs: int = 10
    batch_size: int = 2
    optimizer: str = "adam"
    learning_rate: float = 3e-4
    augment: bool = True
    flip_prob: float = 0.5
    crop_pad: int = 4
    dropout: float = 0.0
    seed: int = 0
    stop_at_accuracy: float | None = None
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.layers < 0:
            raise ConfigurationError("layers must be non-negative")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigurationError(f"{self.heads} heads do not divide projection dim {self.dim}")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two identities")
        check_patching(self.grid, self.grid, self.patch, self.stride)
        if self.class_names and len(self.class_names) != self.num_classes:
            raise ConfigurationError("class_names length must equal num_classes")

    @property
    def num_patches(self) -> int:
        return patch_count(self.grid, self.grid, self.patch, self.stride)


class HybridViT(nn.Module):
    def __init__(self, config: RecognizerConfig, backbone: nn.Module | None = None):
        super().__init__()
        self.config = config
        self.backbone = freeze(backbone or build_backbone(config.backbone, config.in_channels, config.grid))
        with torch.no_grad():
            fmap = self.backbone(torch.zeros(1, config.in_channels, config.input_size, config.input_size))
        if fmap.shape[2:] != (config.grid, config.grid):
            raise ConfigurationError(f"backbone yields a {tuple(fmap.shape[2:])} map, config says grid={config.grid}")
        patch_len = config.patch * config.patch * fmap.shape[1]
        n = config.num_patches
        d = config.dim
        self.projection = nn.Parameter(torch.randn(patch_len, d) / math.sqrt(patch_len))
        self.class_token = nn.Parameter(torch.zeros(d))
        self.position = nn.Parameter(torch.randn(n + 1, d) * 0.02)
        self.blocks = nn.ModuleList(
            EncoderBlock(d, config.heads, config.mlp_ratio * d, config.dropout) for _ in range(config.layers)
        )
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.num_classes)

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def tokens(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            fmap = self.backbone(x)
        patches = make_patches(fmap.permute(0, 2, 3, 1), self.config.patch, self.config.stride)
        return encode_patches(patches, self.projection, self.position, self.class_token)

    def represent(self, x: torch.Tensor) -> torch.Tensor:
        return transformer_encode(self.tokens(x), self.blocks, self.norm)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.represent(x))

    def predict_proba(self, images) -> np.ndarray:
        x = images_to_tensor(images, self.config.input_size)
        if x.shape[1] != self.config.in_channels:
            raise ShapeError(f"recognizer expects {self.config.in_channels} channels, got {x.shape[1]}")
        was_training = self.training
        self.eval()
        with torch.no_grad():
            probs = torch.cat([classify(self(x[i : i + 64])) for i in range(0, len(x), 64)])
        self.train(was_training)
        return probs.double().numpy()

    def predict(self, images) -> np.ndarray:
        return self.predict_proba(images).argmax(axis=1)


def build_recognizer(config: RecognizerConfig | None = None) -> HybridViT:
    config = config or RecognizerConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return HybridViT(config)


def augment(x: torch.Tensor, gen: torch.Generator, flip_prob: float = 0.5, pad: int = 4) -> torch.Tensor:
    """Random horizontal flip plus a random ``pad``-pixel shifted crop (reflect padding)."""
    b, _, h, w = x.shape
    flip = torch.rand(b, generator=gen) < flip_prob
    x = torch.where(flip[:, None, None, None], x.flip(3), x)
    if pad <= 0:
        return x
    padded = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    offs = torch.randint(0, 2 * pad + 1, (b, 2), generator=gen)
    return torch.stack([padded[i, :, oy : oy + h, ox : ox + w] for i, (oy, ox) in enumerate(offs.tolist())])


def train_recognizer(model: HybridViT, images, labels, config: RecognizerConfig | None = None):
    """Train everything except the backbone; returns ``(model, history)``.

    ``history["loss"]`` is the mean (augmented) training loss per epoch.
    ``history["clean_loss"]`` and ``history["accuracy"]`` are measured on the
    unaugmented training set in inference mode; ``clean_loss[0]`` is taken
    at initialization.
    """
    config = config or model.config
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if len(y) == 0:
        raise DataError("no training samples")
    if y.min() < 0 or y.max() >= model.config.num_classes:
        raise DataError(f"labels must lie in [0, {model.config.num_classes})")
    x = images_to_tensor(images, model.config.input_size)
    if len(x) != len(y):
        raise DataError("images and labels differ in length")

    params = [p for n, p in model.named_parameters() if not n.startswith("backbone.")]
    opt_cls = torch.optim.Adam if config.optimizer == "adam" else torch.optim.RAdam
    opt = opt_cls(params, lr=config.learning_rate)
    order_gen = seeded(config.seed)

    def clean_eval():
        model.eval()
        with torch.no_grad():
            logits = torch.cat([model(x[i : i + 64]) for i in range(0, len(x), 64)])
        return F.cross_entropy(logits, y).item(), (logits.argmax(1) == y).float().mean().item()

    init_loss, _ = clean_eval()
    history = {"loss": [], "clean_loss": [init_loss], "accuracy": []}
    for epoch in range(config.epochs):
        aug_gen = seeded(config.seed * 100003 + epoch)
        model.train()
        order = torch.randperm(len(x), generator=order_gen)
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            xb = augment(x[idx], aug_gen, config.flip_prob, config.crop_pad) if config.augment else x[idx]
            loss = F.cross_entropy(model(xb), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history["loss"].append(total / len(x))
        clean, acc = clean_eval()
        history["clean_loss"].append(clean)
        history["accuracy"].append(acc)
        log.info("recognizer epoch %d/%d loss %.4f acc %.3f", epoch + 1, config.epochs, history["loss"][-1], acc)
        if config.stop_at_accuracy is not None and acc >= config.stop_at_accuracy:
            break
    model.eval()
    return model, history


@dataclass
class RecognizerEvaluation:
    report: metrics.ClassificationReport
    roc: list[metrics.RocCurve | None]
    probabilities: np.ndarray
    predictions: np.ndarray


def evaluate_recognizer(model: HybridViT, images, labels) -> RecognizerEvaluation:
    probs = model.predict_proba(images)
    preds = probs.argmax(axis=1)
    labels = np.asarray(labels)
    classes = list(range(model.config.num_classes))
    report = metrics.classification_report(preds, labels, classes)
    roc = metrics.one_vs_rest_roc(probs, labels, model.config.num_classes)
    return RecognizerEvaluation(report, roc, probs, preds)


def save_recognizer(model: HybridViT, path) -> str:
    tensors = dict(model.state_dict())
    if parse_backbone_spec(model.config.backbone)[0] == "pretrained":
        tensors["__backbone_script__"] = torch.frombuffer(bytearray(script_bytes(model.backbone)), dtype=torch.uint8)
    return checkpoint.save_container(path, "recognizer", asdict(model.config), tensors)


def load_recognizer(path) -> HybridViT:
    c = checkpoint.load_container(path, "recognizer")
    config = RecognizerConfig(**c.config)
    script = c.tensors.pop("__backbone_script__", None)
    with torch.random.fork_rng(devices=[]):
        backbone = build_backbone(
            config.backbone, config.in_channels, config.grid, None if script is None else script.numpy().tobytes()
        )
        model = HybridViT(config, backbone)
    model.load_state_dict(c.tensors)
    return model.eval()
