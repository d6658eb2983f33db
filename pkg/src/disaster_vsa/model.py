"""Backbones, task heads and losses."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn

SOFTMAX = "softmax"
SIGMOID = "sigmoid"
HEAD_MODES = (SOFTMAX, SIGMOID)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class WeightsUnavailableError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneInfo:
    name: str
    input_size: int
    feature_dim: int
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    default_hidden_units: int


BACKBONES = {
    "inception_v3": BackboneInfo("inception_v3", 299, 2048, IMAGENET_MEAN, IMAGENET_STD, 256),
    "vgg19": BackboneInfo("vgg19", 224, 512, IMAGENET_MEAN, IMAGENET_STD, 256),
    "toy": BackboneInfo("toy", 64, 64, IMAGENET_MEAN, IMAGENET_STD, 32),
}


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "inception_v3"
    pretrained: bool = True
    head_mode: str = SOFTMAX
    num_outputs: int = 3
    freeze_backbone: bool = False
    head_hidden_units: int = 256

    def __post_init__(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {sorted(BACKBONES)}")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"unknown head_mode {self.head_mode!r}")
        if self.num_outputs <= 0:
            raise ValueError(f"num_outputs must be positive, got {self.num_outputs}")
        if self.head_hidden_units < 0:
            raise ValueError("head_hidden_units must be >= 0")

    @classmethod
    def for_task(cls, task, backbone: str, **overrides) -> "ModelConfig":
        """Head shape and activation derived from a :class:`TaskSpec`."""
        info = BACKBONES[backbone]
        params = dict(
            backbone=backbone,
            pretrained=backbone != "toy",
            head_mode=SIGMOID if task.is_multi_label else SOFTMAX,
            num_outputs=task.num_labels,
            head_hidden_units=info.default_hidden_units,
        )
        params.update(overrides)
        return cls(**params)

    @property
    def info(self) -> BackboneInfo:
        return BACKBONES[self.backbone]


class ToyBackbone(nn.Module):
    """Small randomly initialised convnet for tests and smoke runs."""

    def __init__(self) -> None:
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)


class VGGFeatures(nn.Module):
    def __init__(self, features: nn.Module) -> None:
        super().__init__()
        self.features = features
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.flatten(self.pool(self.features(x)), 1)


def _offline_hint(name: str, exc: Exception) -> WeightsUnavailableError:
    hub = os.path.join(torch.hub.get_dir(), "checkpoints")
    return WeightsUnavailableError(
        f"could not fetch ImageNet weights for {name} ({exc}). "
        f"For offline use, copy the torchvision weight file into {hub} "
        f"(or set TORCH_HOME), or pass pretrained=False / --no-pretrained."
    )


def _fetch(name: str, build: Callable[[], nn.Module]) -> nn.Module:
    try:
        return build()
    except (OSError, RuntimeError) as exc:
        # URLError subclasses OSError; a truncated download surfaces as RuntimeError
        raise _offline_hint(name, exc) from exc


def _inception(pretrained: bool) -> nn.Module:
    from torchvision.models import Inception_V3_Weights, inception_v3

    if pretrained:
        net = _fetch("inception_v3", lambda: inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1))
    else:
        net = inception_v3(weights=None, aux_logits=True, transform_input=True, init_weights=True)
    net.aux_logits = False
    net.AuxLogits = None
    net.fc = nn.Identity()
    return net


def _vgg19(pretrained: bool) -> nn.Module:
    from torchvision.models import VGG19_Weights, vgg19

    if pretrained:
        net = _fetch("vgg19", lambda: vgg19(weights=VGG19_Weights.IMAGENET1K_V1))
    else:
        net = vgg19(weights=None)
    return VGGFeatures(net.features)


def build_backbone(name: str, pretrained: bool) -> nn.Module:
    """Feature extractor returning a pooled ``(N, feature_dim)`` tensor."""
    if name == "inception_v3":
        return _inception(pretrained)
    if name == "vgg19":
        return _vgg19(pretrained)
    if name == "toy":
        return ToyBackbone()
    raise ValueError(f"unknown backbone {name!r}")


class TransferModel(nn.Module):
    """Backbone plus a task head.

    ``forward`` returns pre-activation logits (what the losses expect);
    :meth:`scores` applies softmax or element-wise sigmoid.
    """

    def __init__(self, cfg: ModelConfig, backbone: nn.Module) -> None:
        super().__init__()
        self.cfg = cfg
        self.backbone = backbone
        dim = cfg.info.feature_dim
        layers: list[nn.Module] = []
        if cfg.head_hidden_units:
            layers += [nn.Linear(dim, cfg.head_hidden_units), nn.ReLU(inplace=True)]
            dim = cfg.head_hidden_units
        layers.append(nn.Linear(dim, cfg.num_outputs))
        self.head = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x))

    def scores(self, x: torch.Tensor) -> torch.Tensor:
        return activate(self.cfg.head_mode, self(x))


def build_model(cfg: ModelConfig) -> TransferModel:
    pretrained = cfg.pretrained and cfg.backbone != "toy"
    model = TransferModel(cfg, build_backbone(cfg.backbone, pretrained))
    trainable_parameters(model, cfg.freeze_backbone)
    return model


def trainable_parameters(model: TransferModel, freeze_backbone: bool) -> list[nn.Parameter]:
    """Select (and flag ``requires_grad`` on) the parameters to optimise."""
    for p in model.backbone.parameters():
        p.requires_grad_(not freeze_backbone)
    for p in model.head.parameters():
        p.requires_grad_(True)
    if freeze_backbone:
        return list(model.head.parameters())
    return list(model.parameters())


def activate(head_mode: str, logits: torch.Tensor) -> torch.Tensor:
    if head_mode == SOFTMAX:
        return torch.softmax(logits, dim=-1)
    if head_mode == SIGMOID:
        return torch.sigmoid(logits)
    raise ValueError(f"unknown head_mode {head_mode!r}")


def _check_loss_inputs(head_mode: str, logits: torch.Tensor, target: torch.Tensor) -> None:
    if logits.shape != target.shape:
        raise ValueError(f"logits shape {tuple(logits.shape)} != target shape {tuple(target.shape)}")
    if not torch.all((target == 0) | (target == 1)):
        raise ValueError("target entries must be 0 or 1")
    if head_mode == SOFTMAX and not torch.all(target.sum(dim=-1) == 1):
        raise ValueError("softmax loss needs one-hot targets")
    if head_mode not in HEAD_MODES:
        raise ValueError(f"unknown head_mode {head_mode!r}")


def loss(head_mode: str, logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Categorical CE (softmax) or component-mean binary CE (sigmoid).

    Accepts a single vector or a ``(batch, outputs)`` matrix; batches are
    averaged over rows.
    """
    target = target.to(logits.dtype)
    _check_loss_inputs(head_mode, logits, target)
    if logits.dim() == 1:
        logits, target = logits.unsqueeze(0), target.unsqueeze(0)
    if head_mode == SOFTMAX:
        return F.cross_entropy(logits, target.argmax(dim=-1))
    return F.binary_cross_entropy_with_logits(logits, target, reduction="mean")


def loss_gradient(head_mode: str, logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Closed-form gradient of :func:`loss` with respect to the logits."""
    target = target.to(logits.dtype)
    _check_loss_inputs(head_mode, logits, target)
    rows = 1 if logits.dim() == 1 else logits.shape[0]
    if head_mode == SOFTMAX:
        return (torch.softmax(logits, dim=-1) - target) / rows
    return (torch.sigmoid(logits) - target) / target.numel()
