"""
MTL-Swin-Unet (shared encoder; classification, segmentation and
reconstruction heads) and Joint-SwinTransformer (frozen segmentation encoder
concatenated with a trainable encoder for classification).
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import torch
import torch.nn as nn
from loguru import logger

from mtlswin.config import ModelConfig, build, settings
from mtlswin.errors import ArchitectureMismatchError, CheckpointError, ShapeError
from mtlswin.numerics import load_checkpoint, save_checkpoint
from mtlswin.swin_blocks import (
    FeatureMap, FinalExpand, PatchEmbed, PatchExpand, PatchMerging, StageConfig, SwinStage, init_weights,
)


def stage_config(cfg: ModelConfig, i: int) -> StageConfig:
    return StageConfig(depth=cfg.depths[i], heads=cfg.stage_heads(i), window=cfg.stage_window(i))


@dataclass
class EncoderOutput:
    skips: List[FeatureMap]     # per-stage outputs before merging
    bottleneck: FeatureMap      # normalised final-stage output


@dataclass
class MtlOutputs:
    cls_logits: Optional[torch.Tensor] = None   # (B, 2)
    seg_logits: Optional[torch.Tensor] = None   # (B, H, W, 2)
    rec_image: Optional[torch.Tensor] = None    # (B, H, W, 1)


class SwinEncoder(nn.Module):
    """Patch embedding followed by hierarchical Swin stages with patch merging in between"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.depths = list(cfg.depths)
        self.image_size = cfg.image_size
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_chans, cfg.channels)
        self.stages = nn.ModuleList([
            SwinStage(cfg.stage_channels(i), stage_config(cfg, i), cfg.stage_grid(i), cfg.mlp_ratio)
            for i in range(cfg.num_stages)
        ])
        self.merges = nn.ModuleList([PatchMerging(cfg.stage_channels(i)) for i in range(cfg.num_stages - 1)])
        self.norm = nn.LayerNorm(cfg.final_channels)
        self.out_channels = cfg.final_channels

    def forward(self, images: torch.Tensor) -> EncoderOutput:
        if images.dim() != 4 or images.shape[1:3] != (self.image_size, self.image_size):
            raise ShapeError(f"Expected (B, {self.image_size}, {self.image_size}, C) images, got {tuple(images.shape)}")
        fm = self.patch_embed(images)
        skips = []
        for i, stage in enumerate(self.stages):
            fm = stage(fm)
            skips.append(fm)
            if i < len(self.merges):
                fm = self.merges[i](fm)
        return EncoderOutput(skips, FeatureMap(self.norm(fm.tokens), fm.grid))


class SwinDecoder(nn.Module):
    """
    Symmetric decoder: patch expansion per level, skip fusion by channel
    concatenation and a 2C -> C projection, Swin blocks, then 4x final expansion.
    """

    def __init__(self, cfg: ModelConfig, out_chans: int):
        super().__init__()
        n = cfg.num_stages
        self.levels = list(range(n - 2, -1, -1))
        self.first_expand = PatchExpand(cfg.stage_channels(n - 1)) if n > 1 else None
        self.concat_back = nn.ModuleList([nn.Linear(2 * cfg.stage_channels(l), cfg.stage_channels(l)) for l in self.levels])
        self.stages = nn.ModuleList([
            SwinStage(cfg.stage_channels(l), stage_config(cfg, l), cfg.stage_grid(l), cfg.mlp_ratio)
            for l in self.levels
        ])
        self.expands = nn.ModuleList([PatchExpand(cfg.stage_channels(l)) for l in self.levels if l > 0])
        self.norm = nn.LayerNorm(cfg.channels)
        self.final = FinalExpand(cfg.channels, out_chans, cfg.patch_size)

    def forward(self, encoded: EncoderOutput) -> torch.Tensor:
        fm = encoded.bottleneck
        if self.first_expand is not None:
            fm = self.first_expand(fm)
        for j, level in enumerate(self.levels):
            fused = torch.cat([fm.tokens, encoded.skips[level].tokens], dim=-1)
            fm = self.stages[j](FeatureMap(self.concat_back[j](fused), fm.grid))
            if level > 0:
                fm = self.expands[j](fm)
        return self.final(FeatureMap(self.norm(fm.tokens), fm.grid))


class ClassificationHead(nn.Module):
    """Global average pooling over tokens, then one linear layer"""

    def __init__(self, in_dim: int, num_classes: int = 2):
        super().__init__()
        self.fc = nn.Linear(in_dim, num_classes)

    @staticmethod
    def pool(fm: FeatureMap) -> torch.Tensor:
        return fm.tokens.mean(dim=1)

    def forward(self, fm: FeatureMap) -> torch.Tensor:
        return self.fc(self.pool(fm))


class MtlSwinUnet(nn.Module):
    """Shared Swin encoder with the heads named in ``cfg.tasks``"""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = SwinEncoder(cfg)
        self.cls_head = ClassificationHead(cfg.final_channels, cfg.num_classes) if cfg.has_task("cls") else None
        self.seg_decoder = SwinDecoder(cfg, cfg.seg_classes) if cfg.has_task("seg") else None
        self.rec_decoder = SwinDecoder(cfg, cfg.in_chans) if cfg.has_task("rec") else None
        self.apply(init_weights)

    def forward(self, images: torch.Tensor) -> MtlOutputs:
        encoded = self.encoder(images)
        return MtlOutputs(
            cls_logits=self.cls_head(encoded.bottleneck) if self.cls_head is not None else None,
            seg_logits=self.seg_decoder(encoded) if self.seg_decoder is not None else None,
            rec_image=self.rec_decoder(encoded) if self.rec_decoder is not None else None,
        )

    def classify(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images).cls_logits


def freeze(module: nn.Module) -> nn.Module:
    for param in module.parameters():
        param.requires_grad_(False)
    return module.eval()


class JointSwinTransformer(nn.Module):
    """
    Classification from two encoders of equal stage depths: one frozen after
    segmentation training, one trainable. Final-stage features are concatenated
    along channels before pooling.
    """

    def __init__(self, cfg: ModelConfig, frozen_encoder: Optional[SwinEncoder] = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = SwinEncoder(cfg)
        self.encoder.apply(init_weights)
        if frozen_encoder is None:
            frozen_encoder = SwinEncoder(cfg)
            frozen_encoder.apply(init_weights)
        if frozen_encoder.depths != list(cfg.depths):
            raise ArchitectureMismatchError(
                f"Frozen encoder depths {frozen_encoder.depths} differ from trainable depths {list(cfg.depths)}"
            )
        self.frozen_encoder = freeze(frozen_encoder)
        self.head = ClassificationHead(self.encoder.out_channels + frozen_encoder.out_channels, cfg.num_classes)
        init_weights(self.head.fc)

    def train(self, mode: bool = True):
        super().train(mode)
        self.frozen_encoder.eval()
        return self

    def concat_features(self, images: torch.Tensor, ablate_trainable: bool = False) -> FeatureMap:
        frozen = self.frozen_encoder(images).bottleneck
        trainable = self.encoder(images).bottleneck
        tokens = trainable.tokens
        if ablate_trainable:
            tokens = torch.zeros_like(tokens)
        return FeatureMap(torch.cat([frozen.tokens, tokens], dim=-1), frozen.grid)

    def forward(self, images: torch.Tensor, ablate_trainable: bool = False) -> torch.Tensor:
        return self.head(self.concat_features(images, ablate_trainable))

    def classify(self, images: torch.Tensor) -> torch.Tensor:
        return self.forward(images)


Model = Union[MtlSwinUnet, JointSwinTransformer]


def save_model(model: Model, path: Union[str, Path], **meta: Any) -> Path:
    """Write the model state plus its config through the flat checkpoint container"""
    kind = "joint" if isinstance(model, JointSwinTransformer) else "mtl"
    record = {"kind": kind, "model_config": model.cfg.model_dump(mode="json")}
    record.update(meta)
    return save_checkpoint(path, model.state_dict(), record)


def load_model(path: Union[str, Path]) -> Tuple[Model, Dict[str, Any]]:
    tensors, meta = load_checkpoint(path)
    if "model_config" not in meta:
        raise CheckpointError(f"{path} carries no model config")
    cfg = build(ModelConfig, meta["model_config"])
    model: Model = JointSwinTransformer(cfg) if meta.get("kind") == "joint" else MtlSwinUnet(cfg)
    try:
        model.load_state_dict(tensors)
    except RuntimeError as e:
        raise CheckpointError(f"State in {path} does not fit its config: {e}") from e
    return model, meta


def encoder_from_checkpoint(path: Union[str, Path], cfg: ModelConfig) -> SwinEncoder:
    """Extract the encoder of a trained Swin-Unet checkpoint for joint learning"""
    tensors, meta = load_checkpoint(path)
    source_cfg = build(ModelConfig, meta.get("model_config", {}))
    if source_cfg.depths != cfg.depths or source_cfg.channels != cfg.channels:
        raise ArchitectureMismatchError(
            f"Checkpoint encoder depths/channels {source_cfg.depths}/{source_cfg.channels} "
            f"do not match {cfg.depths}/{cfg.channels}"
        )
    if source_cfg.image_size != cfg.image_size or source_cfg.window != cfg.window:
        raise ArchitectureMismatchError("Checkpoint encoder was built for another input size or window")
    encoder = SwinEncoder(cfg)
    prefix = "encoder."
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    if not state:
        raise CheckpointError(f"No encoder weights in {path}")
    encoder.load_state_dict(state)
    return encoder


def load_pretrained(module: nn.Module, path: Union[str, Path]) -> List[str]:
    """
    Load shape-compatible weights from a torch state dict or a checkpoint file.
    Returns the keys that were skipped.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        is_container = fh.readline().rstrip(b"\n") == settings.CHECKPOINT_HEADER.encode()
    if is_container:
        state, _ = load_checkpoint(path)
    else:
        state = torch.load(path, map_location="cpu", weights_only=True)
        state = state.get("model", state.get("state_dict", state))

    own = module.state_dict()
    usable = {k: v for k, v in state.items() if k in own and own[k].shape == v.shape}
    skipped = sorted(set(state) - set(usable))
    module.load_state_dict(usable, strict=False)
    logger.info(f"Loaded {len(usable)} pretrained tensors from {path.name}, skipped {len(skipped)}")
    return skipped


# Config keys that fix the architecture of a checkpoint
ARCH_KEYS = ("variant", "depths", "channels", "heads", "window", "patch_size", "image_size", "tasks")


def check_config_matches(cfg: ModelConfig, supplied: Mapping[str, Any]) -> None:
    """Raise when architecture keys given on the command line disagree with a checkpoint's config"""
    given = {k: v for k, v in supplied.items() if k in ARCH_KEYS}
    if not given:
        return
    values = cfg.model_dump(exclude={"weights"})
    values.update(given)
    expected = build(ModelConfig, values)
    differing = [k for k in ARCH_KEYS if getattr(expected, k) != getattr(cfg, k)]
    if differing:
        details = ", ".join(f"{k}: {getattr(expected, k)} vs {getattr(cfg, k)}" for k in differing)
        raise ArchitectureMismatchError(f"Config does not match checkpoint ({details})")
