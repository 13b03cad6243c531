"""
Grad-CAM heatmaps over encoder stage features, plus PGM / PNG export and a
lesion localisation check.
"""

from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from loguru import logger
from matplotlib import colormaps
from PIL import Image

from mtlswin.data import Sample
from mtlswin.errors import ShapeError
from mtlswin.numerics import ensure_finite


def _as_image_tensor(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image,
                        dtype=torch.get_default_dtype())
    if x.dim() == 2:
        x = x[..., None]
    if x.dim() != 3:
        raise ShapeError(f"Expected an (H, W, C) image, got {tuple(x.shape)}")
    return x


def _normalise(cam: torch.Tensor) -> torch.Tensor:
    top, bottom = cam.max(), cam.min()
    if top <= 0:
        return torch.zeros_like(cam)
    if top == bottom:
        return torch.ones_like(cam)
    return (cam - bottom) / (top - bottom)


def grad_cam(model: nn.Module, image, target_class: int = 1, stage: int = -1) -> np.ndarray:
    """
    Heatmap (H, W) in [0, 1] for ``target_class``.

    Channel weights are the spatial mean of d(logit)/d(feature) at the selected
    encoder stage (default: the final one). The ReLU'd weighted sum is
    bilinearly upsampled to the input size and min-max normalised; an all-zero
    map stays all-zero.
    """
    x = _as_image_tensor(image)
    height, width = x.shape[:2]
    stages = model.encoder.stages
    captured: Dict[str, object] = {}

    def keep_features(module, inputs, output):
        captured["fm"] = output
        if output.tokens.requires_grad:
            output.tokens.register_hook(lambda grad: captured.__setitem__("grad", grad))

    was_training = model.training
    model.eval()
    handle = stages[stage].register_forward_hook(keep_features)
    try:
        with torch.enable_grad():
            logits = model.classify(x[None])
            ensure_finite(logits.detach(), "classification logits")
            score = logits[0, target_class]
            model.zero_grad(set_to_none=True)
            if score.requires_grad:
                score.backward()
    finally:
        handle.remove()
        model.zero_grad(set_to_none=True)
        model.train(was_training)

    fm = captured["fm"]
    tokens = fm.tokens.detach()[0]
    grad = captured.get("grad")
    if grad is None:
        return np.zeros((height, width))
    weights = grad[0].mean(dim=0)
    h, w = fm.grid
    cam = F.relu((tokens * weights).sum(dim=-1)).reshape(1, 1, h, w)
    cam = F.interpolate(cam, size=(height, width), mode="bilinear", align_corners=False)[0, 0]
    return _normalise(cam).clamp(0.0, 1.0).cpu().numpy()


def argmax_in_box(heatmap: np.ndarray, box: Tuple[int, int, int, int]) -> bool:
    row, col = np.unravel_index(int(np.argmax(heatmap)), heatmap.shape)
    r0, c0, r1, c1 = box
    return bool(r0 <= row <= r1 and c0 <= col <= c1)


def localisation_rate(model: nn.Module, samples: Sequence[Sample], stage: int = -1) -> Optional[float]:
    """Fraction of lesion-bearing positives whose heatmap peak falls in the lesion box"""
    hits = [
        argmax_in_box(grad_cam(model, s.image, 1, stage), s.lesion_box)
        for s in samples if s.label == 1 and s.lesion_box is not None
    ]
    if not hits:
        return None
    rate = float(np.mean(hits))
    logger.info(f"Grad-CAM peak inside lesion box for {sum(hits)}/{len(hits)} positives ({rate:.1%})")
    return rate


def save_heatmap_pgm(heatmap: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(heatmap, 0, 1) * 255).astype(np.uint8)).save(path, format="PPM")
    return path


def overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.4) -> np.ndarray:
    """Blend the jet-coloured heatmap over the grayscale slice; uint8 RGB"""
    gray = np.repeat(np.clip(np.asarray(image, dtype=np.float64).reshape(heatmap.shape), 0, 1)[..., None], 3, axis=-1)
    colour = colormaps["jet"](np.clip(heatmap, 0, 1))[..., :3]
    return np.round(((1 - alpha) * gray + alpha * colour) * 255).astype(np.uint8)


def save_overlay_png(image: np.ndarray, heatmap: np.ndarray, path: Union[str, Path], alpha: float = 0.4) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(image, heatmap, alpha)).save(path, format="PNG")
    return path
