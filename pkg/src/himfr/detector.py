"""Masked/unmasked face classifier: frozen feature extractor plus a trainable FC head."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from . import checkpoint
from .backbones import build_backbone, freeze, parse_backbone_spec, script_bytes
from .errors import ShapeError, TrainingError
from .tensors import images_to_tensor, seeded

log = logging.getLogger(__name__)

EPS = 1e-12
MASKED = 1  # index of the "masked" output unit


def cross_entropy(truth, predicted, eps: float = EPS) -> float:
    """Categorical cross-entropy ``-sum(y * log(p + eps))`` for one sample."""
    y = np.asarray(truth, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1:
        raise ValueError(f"truth and prediction must be equal-length vectors, got {y.shape} and {p.shape}")
    if abs(p.sum() - 1.0) > 1e-6 or (p < 0).any():
        raise ValueError("prediction is not a probability distribution")
    if not (np.isin(y, (0.0, 1.0)).all() and y.sum() == 1.0):
        raise ValueError("truth must be one-hot")
    return float(-np.sum(y * np.log(p + eps)))


def batch_cross_entropy(truths, predicted, eps: float = EPS) -> float:
    """Mean of the per-sample losses."""
    truths = np.asarray(truths, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if truths.shape != predicted.shape or truths.ndim != 2:
        raise ValueError("expected (batch, classes) arrays of equal shape")
    return float(np.mean([cross_entropy(t, p, eps) for t, p in zip(truths, predicted)]))


def ce_loss(probs: torch.Tensor, targets: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Torch version of :func:`batch_cross_entropy` on integer targets."""
    onehot = nn.functional.one_hot(targets, probs.shape[1]).to(probs.dtype)
    return -(onehot * torch.log(probs + eps)).sum(dim=1).mean()


@dataclass
class DetectorTrainConfig:
    epochs: int = 5
    batch_size: int = 16
    optimizer: str = "radam"
    learning_rate: float = 1e-4
    input_size: int = 224
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.input_size) <= 0 or self.learning_rate <= 0:
            raise ValueError("detector training settings must be positive")
        if self.optimizer not in ("radam", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class DetectorVerdict:
    is_masked: bool
    probability: float


class MaskDetector(nn.Module):
    def __init__(
        self,
        backbone: nn.Module,
        feature_size: int,
        hidden: int = 128,
        *,
        meta: dict | None = None,
    ):
        super().__init__()
        self.backbone = freeze(backbone)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.BatchNorm1d(feature_size),
            nn.Linear(feature_size, hidden),
            nn.ReLU(),
            nn.BatchNorm1d(hidden),
            nn.Linear(hidden, 2),
        )
        self.meta = dict(meta or {})

    @property
    def input_size(self) -> int:
        return int(self.meta["input_size"])

    @property
    def in_channels(self) -> int:
        return int(self.meta["in_channels"])

    def train(self, mode: bool = True):
        super().train(mode)
        self.backbone.eval()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            feats = self.backbone(x)
        return self.head(feats)

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self(x), dim=1)

    def predict_proba(self, images) -> np.ndarray:
        """Masked-class probability for each image (inference mode)."""
        x = self._prepare(images)
        was_training = self.training
        self.eval()
        with torch.no_grad():
            p = self.probabilities(x)[:, MASKED].double().numpy()
        self.train(was_training)
        return p

    def detect(self, img, threshold: float = 0.5) -> DetectorVerdict:
        p = float(self.predict_proba([img])[0])
        # A probability exactly at the threshold counts as unmasked.
        return DetectorVerdict(p > threshold, p)

    def _prepare(self, images) -> torch.Tensor:
        x = images_to_tensor(images, self.input_size)
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"detector expects {self.in_channels} channels, got {x.shape[1]}")
        return x


def build_detector(
    backbone_spec: str = "toy:64",
    head_widths: tuple[int, int] = (128, 2),
    *,
    in_channels: int = 3,
    input_size: int = 224,
    grid: int = 8,
    seed: int = 0,
) -> MaskDetector:
    """Fresh head on top of a frozen backbone; identical seeds give identical weights."""
    hidden, out = head_widths
    if out != 2:
        raise ValueError("the detector head is binary; second width must be 2")
    parse_backbone_spec(backbone_spec)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        backbone = build_backbone(backbone_spec, in_channels, grid)
        with torch.no_grad():
            fmap = backbone.eval()(torch.zeros(1, in_channels, input_size, input_size))
        meta = {
            "backbone": backbone_spec,
            "in_channels": in_channels,
            "input_size": input_size,
            "grid": grid,
            "hidden": hidden,
            "feature_shape": list(fmap.shape[1:]),
        }
        return MaskDetector(backbone, int(fmap[0].numel()), hidden, meta=meta)


def detect(model: MaskDetector, img, threshold: float = 0.5) -> DetectorVerdict:
    return model.detect(img, threshold)


def train_detector(model: MaskDetector, images, labels, config: DetectorTrainConfig | None = None):
    """Train the head only; returns ``(model, per-epoch mean loss history)``."""
    config = config or DetectorTrainConfig()
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if set(y.unique().tolist()) != {0, 1}:
        raise TrainingError("detector training data needs both masked and unmasked samples")
    x = images_to_tensor(images, model.input_size)
    if len(x) != len(y):
        raise TrainingError("images and labels differ in length")

    opt_cls = torch.optim.RAdam if config.optimizer == "radam" else torch.optim.Adam
    opt = opt_cls(model.head.parameters(), lr=config.learning_rate)
    gen = seeded(config.seed)
    history = []
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(x), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(x), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:  # batch norm needs at least two samples
                continue
            probs = model.probabilities(x[idx])
            loss = ce_loss(probs, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.append(total / seen)
        log.info("detector epoch %d/%d loss %.5f", epoch + 1, config.epochs, history[-1])
    model.eval()
    model.meta["train_config"] = asdict(config)
    return model, history


def save_detector(model: MaskDetector, path) -> str:
    tensors = dict(model.state_dict())
    if parse_backbone_spec(model.meta["backbone"])[0] == "pretrained":
        tensors["__backbone_script__"] = torch.frombuffer(bytearray(script_bytes(model.backbone)), dtype=torch.uint8)
    return checkpoint.save_container(path, "detector", model.meta, tensors)


def load_detector(path) -> MaskDetector:
    c = checkpoint.load_container(path, "detector")
    meta = c.config
    script = c.tensors.pop("__backbone_script__", None)
    backbone = build_backbone(
        meta["backbone"], meta["in_channels"], meta["grid"], None if script is None else script.numpy().tobytes()
    )
    feature_size = int(np.prod(meta["feature_shape"]))
    model = MaskDetector(backbone, feature_size, meta["hidden"], meta=meta)
    model.load_state_dict(c.tensors)
    return model.eval()
