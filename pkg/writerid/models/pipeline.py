"""
Writer identification model.
Backbone → channel reduction → L2 normalization → SPP → NetVLAD → head, with an
optional self/cross attention path, plus checkpoint persistence.
"""

from pathlib import Path
from typing import Dict, Optional, Union

import structlog
import torch
import torch.nn as nn
from pydantic import BaseModel, ConfigDict, Field

from ..core.errors import CheckpointError
from .backbones import BackboneName, build_backbone
from .layers import (
    ChannelReduction,
    ClassificationHead,
    CrossAttentionBlock,
    FeatureMap,
    L2Normalize,
    NetVLAD,
    SelfAttentionBlock,
    SpatialPyramidPooling,
    Stage,
    VladDescriptor,
    from_tokens,
    glorot_init,
    to_tokens,
)

logger = structlog.get_logger()

CHECKPOINT_FORMAT = 1
REDUCED_CHANNELS = 64
ATTENTION_HEADS = 6
ATTENTION_KEY_DIM = 32


class ModelConfig(BaseModel):
    """Architecture settings (`model.*` config keys)."""

    model_config = ConfigDict(extra="forbid")

    backbone: BackboneName = BackboneName.RESNET50
    attention: bool = False
    num_classes: int = Field(default=2, ge=2)
    dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    head_width: int = Field(default=512, ge=1)
    vlad_clusters: int = Field(default=64, ge=1)


class WriterIdentifier(nn.Module):
    """
    End-to-end classifier over 224×224 line images in [0, 1].

    The attention path inserts a self-attention block on the normalized
    64-channel map, another on the pooled 192-channel map, and a cross
    attention in which the NetVLAD vector queries the first block's
    layer-normalized tokens.
    """

    def __init__(self, cfg: ModelConfig, pretrained: bool = True):
        super().__init__()
        self.cfg = cfg
        self.backbone = build_backbone(cfg.backbone, pretrained=pretrained)
        self.reduce = ChannelReduction(self.backbone.feature_channels, REDUCED_CHANNELS)
        self.normalize = L2Normalize()
        self.spp = SpatialPyramidPooling()
        pooled = REDUCED_CHANNELS * len(self.spp.levels)
        if cfg.attention:
            self.block1 = SelfAttentionBlock(REDUCED_CHANNELS, ATTENTION_HEADS, ATTENTION_KEY_DIM)
            self.block2 = SelfAttentionBlock(pooled, ATTENTION_HEADS, ATTENTION_KEY_DIM)
        self.vlad = NetVLAD(cfg.vlad_clusters, pooled)
        if cfg.attention:
            self.cross = CrossAttentionBlock(
                self.vlad.output_dim, REDUCED_CHANNELS, ATTENTION_HEADS * ATTENTION_KEY_DIM,
                ATTENTION_HEADS, ATTENTION_KEY_DIM,
            )
        descriptor_dim = ATTENTION_HEADS * ATTENTION_KEY_DIM if cfg.attention else self.vlad.output_dim
        self.head = ClassificationHead(descriptor_dim, cfg.num_classes, cfg.head_width, cfg.dropout)

        for module in (self.reduce, self.head, *([self.block1, self.block2, self.cross] if cfg.attention else [])):
            glorot_init(module)
        if cfg.backbone == BackboneName.TINY_TEST:
            glorot_init(self.backbone)

    def train(self, mode: bool = True) -> "WriterIdentifier":
        super().train(mode)
        for module in self.backbone.modules():
            if isinstance(module, nn.modules.batchnorm._BatchNorm):
                if not any(p.requires_grad for p in module.parameters()):
                    module.eval()
        return self

    def _stages(self, x: torch.Tensor) -> Dict[str, object]:
        f1 = self.backbone(x)
        f2 = self.reduce(f1)
        f3 = self.normalize(f2)
        context = None
        if self.cfg.attention:
            tokens, context = self.block1(to_tokens(f3), return_normalized=True)
            f3 = from_tokens(tokens, f3.shape[-2], f3.shape[-1])
        f4 = self.spp(f3)
        tokens = to_tokens(f4)
        if self.cfg.attention:
            tokens = self.block2(tokens)
        vlad = self.vlad.describe(tokens)
        descriptor = self.cross(vlad.vector, context) if self.cfg.attention else vlad.vector
        return {"F1": f1, "F2": f2, "F3": f3, "F4": f4, "V": vlad, "descriptor": descriptor}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Class probabilities, (B, num_classes)."""
        return self.head(self._stages(x)["descriptor"])

    def extract_stages(self, x: torch.Tensor) -> Dict[str, Union[FeatureMap, VladDescriptor, torch.Tensor]]:
        """Tagged intermediate maps F1-F4, the VLAD descriptor and the head input."""
        stages = self._stages(x)
        out: Dict[str, Union[FeatureMap, VladDescriptor, torch.Tensor]] = {
            stage.value: FeatureMap(stages[stage.value], stage) for stage in Stage
        }
        out["V"] = stages["V"]
        out["descriptor"] = stages["descriptor"]
        return out

    def regularization_loss(self) -> torch.Tensor:
        """λ·Σw² over the reduction kernel and the 512-unit head kernel."""
        penalty = self.reduce.conv.weight.pow(2).sum() + self.head.dense.weight.pow(2).sum()
        return self.cfg.weight_decay * penalty


def build_model(cfg: ModelConfig, pretrained: bool = True) -> WriterIdentifier:
    model = WriterIdentifier(cfg, pretrained=pretrained)
    logger.info(
        "model_built",
        backbone=cfg.backbone.value,
        attention=cfg.attention,
        num_classes=cfg.num_classes,
        parameters=sum(p.numel() for p in model.parameters()),
    )
    return model


def save_checkpoint(model: WriterIdentifier, path: Path, extra: Optional[dict] = None) -> Path:
    """Single archive keyed by canonical tensor names plus the architecture it belongs to."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    archive = {
        "format": CHECKPOINT_FORMAT,
        "backbone": model.cfg.backbone.value,
        "num_classes": model.cfg.num_classes,
        "attention": model.cfg.attention,
        "model_config": model.cfg.model_dump(mode="json"),
        "state_dict": {name: t.detach().cpu() for name, t in model.state_dict().items()},
    }
    if extra:
        archive["extra"] = extra
    torch.save(archive, path)
    logger.info("checkpoint_saved", path=str(path))
    return path


def _read_archive(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}")
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a format-{CHECKPOINT_FORMAT} checkpoint")
    return archive


def load_weights(model: WriterIdentifier, path: Path) -> WriterIdentifier:
    """Load a checkpoint into a model of the same architecture."""
    archive = _read_archive(path)
    expected = (model.cfg.backbone.value, model.cfg.num_classes, model.cfg.attention)
    found = (archive["backbone"], archive["num_classes"], archive["attention"])
    if expected != found:
        raise CheckpointError(f"checkpoint {path} holds (backbone, classes, attention)={found}, model is {expected}")
    try:
        model.load_state_dict(archive["state_dict"])
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint {path} does not match the model: {e}")
    return model


def load_checkpoint(path: Path) -> WriterIdentifier:
    """Rebuild the model recorded in a checkpoint and load its weights."""
    archive = _read_archive(path)
    try:
        cfg = ModelConfig(**archive["model_config"])
    except Exception as e:
        raise CheckpointError(f"checkpoint {path} has an invalid model config: {e}")
    return load_weights(WriterIdentifier(cfg, pretrained=False), path)
