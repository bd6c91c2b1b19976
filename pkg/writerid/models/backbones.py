"""
Backbone adapters.
Each adapter turns a (B, 3, 224, 224) image in [0, 1] into a (B, C, 7, 7) feature map.
"""

from enum import Enum
from typing import Callable, Dict, List

import structlog
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core.errors import ConfigError

logger = structlog.get_logger()

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BackboneName(str, Enum):
    RESNET50 = "resnet50-like"
    DENSENET201 = "densenet201-like"
    XCEPTION = "xception-like"
    MOBILENET_V3 = "mobilenetv3-large-like"
    TINY_TEST = "tiny-test"


class BackboneAdapter(nn.Module):
    """Feature extractor plus the pixel preprocessing it was trained with."""

    feature_channels: int = 0

    def __init__(self, features: nn.Module, scaling: str = "imagenet"):
        super().__init__()
        self.features = features
        self.scaling = scaling
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        if self.scaling == "imagenet":
            return (x - self.mean) / self.std
        if self.scaling == "symmetric":
            return x * 2.0 - 1.0
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(self.preprocess(x))

    def trainable_layers(self) -> List[nn.Module]:
        """Modules that own parameters directly, in registration order."""
        return [m for m in self.features.modules() if any(True for _ in m.parameters(recurse=False))]


class TinyBackbone(BackboneAdapter):
    """Three strided convolutions, 224 → 56 → 14 → 7, ending at 32 channels."""

    feature_channels = 32

    def __init__(self):
        super().__init__(
            nn.Sequential(
                nn.Conv2d(3, 8, kernel_size=4, stride=4),
                nn.ReLU(),
                nn.Conv2d(8, 16, kernel_size=4, stride=4),
                nn.ReLU(),
                nn.Conv2d(16, 32, kernel_size=2, stride=2),
                nn.ReLU(),
            ),
            scaling="none",
        )


class ResNet50Backbone(BackboneAdapter):
    feature_channels = 2048

    def __init__(self, pretrained: bool = True):
        from torchvision.models import ResNet50_Weights, resnet50

        net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1 if pretrained else None)
        super().__init__(nn.Sequential(*list(net.children())[:-2]))


class DenseNet201Backbone(BackboneAdapter):
    """torchvision's dense block stack ends in a batch norm; the rectifier is applied here."""

    feature_channels = 1920

    def __init__(self, pretrained: bool = True):
        from torchvision.models import DenseNet201_Weights, densenet201

        net = densenet201(weights=DenseNet201_Weights.IMAGENET1K_V1 if pretrained else None)
        super().__init__(net.features)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(super().forward(x))


class MobileNetV3Backbone(BackboneAdapter):
    feature_channels = 960

    def __init__(self, pretrained: bool = True):
        from torchvision.models import MobileNet_V3_Large_Weights, mobilenet_v3_large

        net = mobilenet_v3_large(weights=MobileNet_V3_Large_Weights.IMAGENET1K_V1 if pretrained else None)
        super().__init__(net.features)


class XceptionBackbone(BackboneAdapter):
    feature_channels = 2048

    def __init__(self, pretrained: bool = True):
        import timm

        net = timm.create_model("legacy_xception", pretrained=pretrained, num_classes=0, global_pool="")
        super().__init__(net, scaling="symmetric")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.features.forward_features(self.preprocess(x))


BACKBONES: Dict[BackboneName, Callable[..., BackboneAdapter]] = {
    BackboneName.RESNET50: ResNet50Backbone,
    BackboneName.DENSENET201: DenseNet201Backbone,
    BackboneName.XCEPTION: XceptionBackbone,
    BackboneName.MOBILENET_V3: MobileNetV3Backbone,
}


def build_backbone(name: BackboneName, pretrained: bool = True) -> BackboneAdapter:
    """Instantiate an adapter; the tiny test backbone never has pretrained weights."""
    name = BackboneName(name)
    if name == BackboneName.TINY_TEST:
        return TinyBackbone()
    try:
        backbone = BACKBONES[name](pretrained=pretrained)
    except Exception as e:
        raise ConfigError(f"could not build backbone {name.value}: {e}")
    logger.info("backbone_built", backbone=name.value, pretrained=pretrained, channels=backbone.feature_channels)
    return backbone
