"""SymmNet classifier: backbone, pooling, dropout and the two symmetric heads."""

from __future__ import annotations

import dataclasses
import pickle
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .bilinear_pooling import TKPFConfig, TKPFPooling
from .errors import ConfigError
from .losses import DualHeadOutput, combined_class_probs

CHECKPOINT_MAGIC = "UDA-BENTHIC-CKPT-1"

# ImageNet statistics expected by the torchvision backbone; reused for tiny_cnn
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)

TINY_WIDTHS = (32, 64, 128)


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "tiny_cnn"
    output_channels: int = 64
    pretrained: bool = False

    def validate(self) -> "BackboneSpec":
        if self.kind == "tiny_cnn":
            if self.output_channels not in TINY_WIDTHS:
                raise ConfigError(f"tiny_cnn output_channels must be one of {TINY_WIDTHS}, "
                                  f"got {self.output_channels}")
        elif self.kind == "resnet50_compatible":
            if self.output_channels != 2048:
                raise ConfigError("resnet50_compatible backbone has 2048 output channels")
        else:
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        return self


class TinyCNN(nn.Module):
    """Four stride-2 conv blocks; returns the final ``(B, d, h, w)`` feature map."""

    def __init__(self, out_channels: int = 64):
        super().__init__()
        widths = [3, out_channels // 4, out_channels // 2, out_channels, out_channels]
        blocks = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            blocks += [
                nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            ]
        self.features = nn.Sequential(*blocks)

    def forward(self, x):
        return self.features(x)


def build_backbone(spec: BackboneSpec) -> nn.Module:
    spec.validate()
    if spec.kind == "tiny_cnn":
        return TinyCNN(spec.output_channels)
    import torchvision

    weights = torchvision.models.ResNet50_Weights.DEFAULT if spec.pretrained else None
    resnet = torchvision.models.resnet50(weights=weights)
    # drop avgpool and fc; pooling is ours
    return nn.Sequential(*list(resnet.children())[:-2])


class GlobalAvgPool(nn.Module):
    def forward(self, feature_map):
        return feature_map.mean(dim=(2, 3))


class SymmNet(nn.Module):
    """Feature extractor ``G`` followed by source and target heads.

    The joint classifier ``C^st`` is not a separate layer: its ``2K`` logits
    are the concatenation of the two heads' logits, so its parameters are
    shared with them.
    """

    def __init__(self, num_classes: int, backbone: BackboneSpec = BackboneSpec(),
                 tkpf: Optional[TKPFConfig] = None, input_size: int = 224,
                 dropout: Optional[float] = None):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {num_classes}")
        self.num_classes = num_classes
        self.input_size = input_size
        self.backbone_spec = backbone.validate()
        self.backbone = build_backbone(backbone)
        d = backbone.output_channels
        if tkpf is not None:
            if tkpf.d != d:
                tkpf = dataclasses.replace(tkpf, d=d)
            self.pool = TKPFPooling(tkpf)
            pooled_dim = tkpf.output_dim
        else:
            self.pool = GlobalAvgPool()
            pooled_dim = d
        if dropout is None:
            dropout = 0.7 if tkpf is not None else 0.0
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {dropout}")
        self.pooled_dim = pooled_dim
        self.dropout = nn.Dropout(dropout)
        self.source_head = nn.Linear(pooled_dim, num_classes)
        self.target_head = nn.Linear(pooled_dim, num_classes)

    @property
    def uses_tkpf(self) -> bool:
        return isinstance(self.pool, TKPFPooling)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """Pooled feature fed to the heads (before dropout)."""
        if images.ndim != 4 or images.shape[1:] != (3, self.input_size, self.input_size):
            raise ValueError(f"expected images of shape (B, 3, {self.input_size}, {self.input_size}), "
                             f"got {tuple(images.shape)}")
        return self.pool(self.backbone(images))

    def classify(self, features: torch.Tensor) -> DualHeadOutput:
        """Dropout, both heads and the three softmaxes on pooled features."""
        h = self.dropout(features)
        logit_s, logit_t = self.source_head(h), self.target_head(h)
        return DualHeadOutput(
            p_s=F.softmax(logit_s, dim=1),
            p_t=F.softmax(logit_t, dim=1),
            p_st=F.softmax(torch.cat([logit_s, logit_t], dim=1), dim=1),
        )

    def forward(self, images: torch.Tensor) -> DualHeadOutput:
        return self.classify(self.features(images))

    @torch.no_grad()
    def predict_target(self, images: torch.Tensor, rule: str = "combined") -> torch.Tensor:
        """Class index per image; ``rule="target_head"`` uses ``argmax p_t`` instead of ``q``."""
        out = self(images)
        return predict_from_output(out, rule)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Disjoint parameter sets for the classifier and extractor updates.

        ``classifier`` holds both heads. ``extractor`` holds the backbone and
        pooling. ``backbone`` and ``tkpf`` split ``extractor`` further for
        per-group learning rates.
        """
        heads = list(self.source_head.parameters()) + list(self.target_head.parameters())
        backbone = list(self.backbone.parameters())
        tkpf = list(self.pool.parameters())
        return {
            "classifier": heads,
            "extractor": backbone + tkpf,
            "heads": heads,
            "backbone": backbone,
            "tkpf": tkpf,
        }


def predict_from_output(out: DualHeadOutput, rule: str = "combined") -> torch.Tensor:
    if rule == "combined":
        scores = combined_class_probs(out.p_st)
    elif rule == "target_head":
        scores = out.p_t
    else:
        raise ValueError(f"unknown prediction rule {rule!r}")
    # torch.argmax returns the first maximal index, i.e. ties go to the lower class
    return torch.argmax(scores, dim=1)


def save_checkpoint(path, model: SymmNet, config: dict, classes: list[str],
                    crop_sizes: Optional[dict] = None, survey_resolutions: Optional[dict] = None) -> None:
    """Single-file archive of weights plus the training config snapshot."""
    torch.save({
        "magic": CHECKPOINT_MAGIC,
        "state_dict": model.state_dict(),
        "config": config,
        "classes": list(classes),
        "crop_sizes": dict(crop_sizes or {}),
        "survey_resolutions": dict(survey_resolutions or {}),
    }, path)


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except (pickle.UnpicklingError, EOFError, RuntimeError) as e:
        raise ValueError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint ({e})") from e
    if not isinstance(ckpt, dict) or ckpt.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    return ckpt
