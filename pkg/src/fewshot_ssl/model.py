"""Shared backbone with supervised, jigsaw and rotation heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import partial

import torch
import torch.nn as nn

BACKBONES = ("small_conv", "paper_resnet18")
BN_POLICIES = ("running_stats", "per_batch")


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "small_conv"
    embed_dim: int = 64
    bn_policy: str = "per_batch"
    width: int = 16

    def __post_init__(self):
        if self.kind not in BACKBONES:
            raise ModelConfigError(f"unknown backbone {self.kind!r}")
        if self.bn_policy not in BN_POLICIES:
            raise ModelConfigError(f"unknown bn_policy {self.bn_policy!r}")
        if self.embed_dim <= 0 or self.width <= 0:
            raise ModelConfigError("embed_dim and width must be positive")
        if self.kind == "paper_resnet18" and self.embed_dim != 512:
            raise ModelConfigError("paper_resnet18 produces 512-dim embeddings")

    def to_dict(self) -> dict:
        return asdict(self)


def batch_norm(channels: int, bn_policy: str) -> nn.BatchNorm2d:
    # per_batch: no running buffers, batch statistics in train and eval alike.
    return nn.BatchNorm2d(channels, track_running_stats=(bn_policy == "running_stats"))


class SmallConv(nn.Module):
    """Four conv blocks: a stride-4 patch stem followed by three 3x3 conv/BN/ReLU/pool blocks."""

    def __init__(self, embed_dim: int = 64, width: int = 16, bn_policy: str = "per_batch"):
        super().__init__()
        bn = partial(batch_norm, bn_policy=bn_policy)
        chans = [width, 2 * width, 4 * width, embed_dim]
        layers = [nn.Conv2d(3, chans[0], 4, stride=4, bias=False), bn(chans[0]), nn.ReLU()]
        for cin, cout in zip(chans[:-1], chans[1:]):
            layers += [nn.Conv2d(cin, cout, 3, padding=1, bias=False), bn(cout), nn.ReLU(), nn.MaxPool2d(2)]
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


def resnet18_backbone(bn_policy: str) -> nn.Module:
    from torchvision.models import resnet18

    net = resnet18(weights=None, norm_layer=partial(batch_norm, bn_policy=bn_policy))
    net.fc = nn.Identity()
    return net


def build_backbone(cfg: BackboneConfig) -> nn.Module:
    if cfg.kind == "small_conv":
        return SmallConv(cfg.embed_dim, cfg.width, cfg.bn_policy)
    return resnet18_backbone(cfg.bn_policy)


def jigsaw_hidden_dim(embed_dim: int) -> int:
    return 4096 if embed_dim == 512 else 8 * embed_dim


class ModelBundle(nn.Module):
    """Backbone ``f`` plus the heads named at construction.

    ``projection`` (embed_dim -> embed_dim fc + ReLU) sits between the backbone
    and the self-supervised heads only; embeddings used for prototypes and the
    supervised classifier are the raw backbone output.
    """

    def __init__(
        self,
        backbone: BackboneConfig,
        num_classes: int | None = None,
        jigsaw_classes: int | None = None,
        rotation: bool = False,
    ):
        super().__init__()
        self.config = backbone
        d = backbone.embed_dim
        self.backbone = build_backbone(backbone)
        self.supervised_head = nn.Linear(d, num_classes) if num_classes else None
        ssl = bool(jigsaw_classes) or rotation
        self.projection = nn.Sequential(nn.Linear(d, d), nn.ReLU()) if ssl else None
        self.jigsaw_head = None
        if jigsaw_classes:
            hidden = jigsaw_hidden_dim(d)
            self.jigsaw_head = nn.Sequential(nn.Linear(9 * d, hidden), nn.ReLU(), nn.Linear(hidden, jigsaw_classes))
        self.rotation_head = None
        if rotation:
            self.rotation_head = nn.Sequential(
                nn.Linear(d, 128), nn.ReLU(), nn.Dropout(0.5),
                nn.Linear(128, 128), nn.ReLU(), nn.Dropout(0.5),
                nn.Linear(128, 4),
            )

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def set_mode(self, mode: str) -> "ModelBundle":
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        return self.train(mode == "train")

    def embed(self, images: torch.Tensor, mode: str | None = None) -> torch.Tensor:
        if mode is not None:
            self.set_mode(mode)
        return self.backbone(images)

    def supervised_forward(self, images: torch.Tensor, mode: str | None = None) -> torch.Tensor:
        if self.supervised_head is None:
            raise ModelConfigError("model has no supervised head (episodic configuration)")
        return self.supervised_head(self.embed(images, mode))

    def jigsaw_forward(self, tiles: torch.Tensor, mode: str | None = None) -> torch.Tensor:
        """``tiles``: (B, 9, C, H, W) -> (B, P) logits."""
        if self.jigsaw_head is None:
            raise ModelConfigError("model has no jigsaw head")
        if tiles.dim() != 5 or tiles.shape[1] != 9:
            raise ValueError(f"expected (B, 9, C, H, W) tiles, got {tuple(tiles.shape)}")
        b = tiles.shape[0]
        feats = self.projection(self.embed(tiles.flatten(0, 1), mode))
        return self.jigsaw_head(feats.reshape(b, -1))

    def rotation_forward(self, images: torch.Tensor, mode: str | None = None) -> torch.Tensor:
        if self.rotation_head is None:
            raise ModelConfigError("model has no rotation head")
        return self.rotation_head(self.projection(self.embed(images, mode)))


def running_stat_buffers(model: nn.Module) -> dict[str, torch.Tensor]:
    """Copies of every batch-norm running statistic buffer in ``model``."""
    return {
        name: buf.detach().clone()
        for name, buf in model.named_buffers()
        if name.rsplit(".", 1)[-1] in ("running_mean", "running_var", "num_batches_tracked")
    }
