"""Frozen feature extractors shared by the detector and the recognizer."""

from __future__ import annotations

import hashlib
import io
from pathlib import Path

import torch
from torch import nn

from .errors import CheckpointError, ConfigurationError


class ToyBackbone(nn.Module):
    """Three strided conv blocks followed by adaptive pooling to a ``grid x grid`` map.

    Stands in for a pretrained ImageNet network at desk scale; its random
    initialization is never trained.
    """

    def __init__(self, in_channels: int = 3, channels: int = 64, grid: int = 8):
        super().__init__()
        widths = (max(channels // 4, 4), max(channels // 2, 8), channels)
        layers = []
        prev = in_channels
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.ReLU(inplace=True)]
            prev = w
        self.features = nn.Sequential(*layers)
        for m in self.features:
            if isinstance(m, nn.Conv2d):
                # ReLU-gain init keeps untrained feature magnitudes O(1).
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.pool = nn.AdaptiveAvgPool2d(grid)
        self.out_channels = channels
        self.grid = grid

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.features(x))


def parse_backbone_spec(spec: str) -> tuple[str, str]:
    kind, _, arg = spec.partition(":")
    if kind not in ("toy", "pretrained") or not arg:
        raise ConfigurationError(f"backbone spec must be 'toy:<channels>' or 'pretrained:<path>', got {spec!r}")
    return kind, arg


def build_backbone(spec: str, in_channels: int, grid: int, scripted: bytes | None = None) -> nn.Module:
    """Instantiate a backbone from its spec string.

    ``pretrained:<path>`` loads an opaque TorchScript module mapping
    ``(B, C, H, W)`` images to ``(B, c, h, w)`` feature maps. ``scripted``
    supplies the same module from bytes (used when restoring checkpoints).
    """
    kind, arg = parse_backbone_spec(spec)
    if kind == "toy":
        try:
            channels = int(arg)
        except ValueError:
            raise ConfigurationError(f"toy backbone channel count must be an integer, got {arg!r}") from None
        return ToyBackbone(in_channels, channels, grid)
    if scripted is not None:
        return torch.jit.load(io.BytesIO(scripted), map_location="cpu")
    path = Path(arg)
    if not path.is_file():
        raise CheckpointError(f"pretrained backbone not found: {path}")
    try:
        return torch.jit.load(str(path), map_location="cpu")
    except Exception as exc:
        raise CheckpointError(f"cannot load pretrained backbone {path}: {exc}") from exc


def script_bytes(module: nn.Module) -> bytes:
    buf = io.BytesIO()
    torch.jit.save(module, buf)
    return buf.getvalue()


def freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()
    return module


def parameter_digest(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
