"""
Hierarchical window-attention building blocks: patch embedding, (shifted)
window multi-head self-attention, patch merging and patch expansion.

All spatial tensors are channels-last. Token sequences are (B, h*w, C) and
travel inside a FeatureMap together with their (h, w) grid.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn as nn
from einops import rearrange

from mtlswin.errors import ShapeError


@dataclass
class FeatureMap:
    """Token sequence (B, h*w, C) laid out on an (h, w) grid"""
    tokens: torch.Tensor
    grid: Tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.dim() != 3 or self.tokens.shape[1] != h * w:
            raise ShapeError(f"tokens {tuple(self.tokens.shape)} do not match grid {self.grid}")

    @property
    def channels(self) -> int:
        return self.tokens.shape[-1]

    def as_grid(self) -> torch.Tensor:
        h, w = self.grid
        return self.tokens.reshape(self.tokens.shape[0], h, w, -1)

    @classmethod
    def from_grid(cls, x: torch.Tensor) -> "FeatureMap":
        b, h, w, c = x.shape
        return cls(x.reshape(b, h * w, c), (h, w))


@dataclass(frozen=True)
class StageConfig:
    depth: int
    heads: int
    window: int

    def shift_for(self, block_index: int, grid_side: int) -> int:
        # No shift once a single window covers the grid
        if block_index % 2 == 0 or grid_side <= self.window:
            return 0
        return self.window // 2


def init_weights(module: nn.Module) -> None:
    """Truncated-normal(0, .02) weights, zero biases, unit LayerNorm"""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def window_partition(x: torch.Tensor, window: int) -> torch.Tensor:
    """(B, H, W, C) -> (B * num_windows, window*window, C)"""
    b, h, w, c = x.shape
    if h % window or w % window:
        raise ShapeError(f"Grid ({h}, {w}) not divisible by window {window}")
    x = x.reshape(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows: torch.Tensor, window: int, h: int, w: int) -> torch.Tensor:
    """Inverse of window_partition"""
    c = windows.shape[-1]
    x = windows.reshape(-1, h // window, w // window, window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, h, w, c)


def relative_position_index(window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij"))
    coords = coords.flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0)
    rel[:, :, 0] += window - 1
    rel[:, :, 1] += window - 1
    rel[:, :, 0] *= 2 * window - 1
    return rel.sum(-1)


def shifted_window_mask(grid: Tuple[int, int], window: int, shift: int) -> torch.Tensor:
    """
    Additive mask (num_windows, N, N): 0 for token pairs from the same region
    of the rolled grid, -inf for pairs that straddle the wrap-around boundary.
    """
    h, w = grid
    regions = torch.zeros((1, h, w, 1))
    label = 0
    for hs in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
        for ws in (slice(0, -window), slice(-window, -shift), slice(-shift, None)):
            regions[:, hs, ws, :] = label
            label += 1
    windows = window_partition(regions, window).squeeze(-1)
    diff = windows.unsqueeze(1) - windows.unsqueeze(2)
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


def merge_gather(x: torch.Tensor) -> torch.Tensor:
    """(B, h, w, C) -> (B, h/2, w/2, 4C) from each 2x2 neighbourhood"""
    b, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"Patch merging needs even extents, got ({h}, {w})")
    x0 = x[:, 0::2, 0::2, :]
    x1 = x[:, 1::2, 0::2, :]
    x2 = x[:, 0::2, 1::2, :]
    x3 = x[:, 1::2, 1::2, :]
    return torch.cat([x0, x1, x2, x3], dim=-1)


def expand_rearrange(x: torch.Tensor, scale: int) -> torch.Tensor:
    """(B, h, w, s*s*c) -> (B, s*h, s*w, c)"""
    if x.shape[-1] % (scale * scale):
        raise ShapeError(f"{x.shape[-1]} channels cannot fill a {scale}x{scale} block")
    return rearrange(x, "b h w (p1 p2 c) -> b (h p1) (w p2) c", p1=scale, p2=scale)


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping patches followed by LayerNorm"""

    def __init__(self, patch_size: int = 4, in_chans: int = 1, embed_dim: int = 96):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(patch_size * patch_size * in_chans, embed_dim)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, images: torch.Tensor) -> FeatureMap:
        b, h, w, _ = images.shape
        p = self.patch_size
        if h % p or w % p:
            raise ShapeError(f"Image ({h}, {w}) not divisible by patch size {p}")
        patches = rearrange(images, "b (h p1) (w p2) c -> b (h w) (p1 p2 c)", p1=p, p2=p)
        return FeatureMap(self.norm(self.proj(patches)), (h // p, w // p))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside a window with relative position bias"""

    def __init__(self, dim: int, heads: int, window: int):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.window = window
        self.scale = (dim // heads) ** -0.5

        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window - 1) ** 2, heads))
        self.register_buffer("relative_position_index", relative_position_index(window), persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def position_bias(self) -> torch.Tensor:
        n = self.window * self.window
        bias = self.relative_position_bias_table[self.relative_position_index.view(-1)]
        return bias.view(n, n, -1).permute(2, 0, 1)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None, return_attention: bool = False):
        b_, n, c = x.shape
        qkv = self.qkv(x).reshape(b_, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)

        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.position_bias().unsqueeze(0)
        if mask is not None:
            num_windows = mask.shape[0]
            attn = attn.view(-1, num_windows, self.heads, n, n) + mask.to(attn.dtype).unsqueeze(1).unsqueeze(0)
            attn = attn.view(-1, self.heads, n, n)
        # torch.softmax subtracts the row max
        attn = torch.softmax(attn, dim=-1)

        out = self.proj((attn @ v).transpose(1, 2).reshape(b_, n, c))
        return (out, attn) if return_attention else out


class SwinBlock(nn.Module):
    """Pre-norm (shifted) window attention and MLP, each with a residual"""

    def __init__(self, dim: int, heads: int, window: int, shift: int = 0, mlp_ratio: float = 4.0):
        super().__init__()
        if shift not in (0, window // 2):
            raise ShapeError(f"shift {shift} must be 0 or {window // 2}")
        self.window = window
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self._masks: Dict[Tuple[int, int], torch.Tensor] = {}

    def _mask(self, grid: Tuple[int, int]) -> Optional[torch.Tensor]:
        if not self.shift:
            return None
        if grid not in self._masks:
            self._masks[grid] = shifted_window_mask(grid, self.window, self.shift)
        return self._masks[grid]

    def attend(self, x: torch.Tensor, return_attention: bool = False):
        """Window attention over a (B, h, w, C) grid, shift and inverse shift included"""
        b, h, w, c = x.shape
        if h % self.window or w % self.window:
            raise ShapeError(f"Grid ({h}, {w}) not divisible by window {self.window}")
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        windows = window_partition(x, self.window)
        out = self.attn(windows, mask=self._mask((h, w)), return_attention=return_attention)
        if return_attention:
            out, attn = out
        x = window_reverse(out, self.window, h, w)
        if self.shift:
            x = torch.roll(x, shifts=(self.shift, self.shift), dims=(1, 2))
        return (x, attn) if return_attention else x

    def forward(self, fm: FeatureMap) -> FeatureMap:
        b, l, c = fm.tokens.shape
        h, w = fm.grid
        x = fm.tokens + self.attend(self.norm1(fm.tokens).view(b, h, w, c)).reshape(b, l, c)
        x = x + self.mlp(self.norm2(x))
        return FeatureMap(x, fm.grid)


class SwinStage(nn.Module):
    """``depth`` blocks at one resolution, shifts alternating 0 and window/2"""

    def __init__(self, dim: int, cfg: StageConfig, grid_side: int, mlp_ratio: float = 4.0):
        super().__init__()
        if cfg.depth < 1:
            raise ShapeError("Stage depth must be >= 1")
        self.cfg = cfg
        self.blocks = nn.ModuleList([
            SwinBlock(dim, cfg.heads, cfg.window, cfg.shift_for(i, grid_side), mlp_ratio)
            for i in range(cfg.depth)
        ])

    def forward(self, fm: FeatureMap) -> FeatureMap:
        for block in self.blocks:
            fm = block(fm)
        return fm


class PatchMerging(nn.Module):
    """(h, w, C) -> (h/2, w/2, 2C): LayerNorm then a 4C -> 2C projection"""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, fm: FeatureMap) -> FeatureMap:
        x = merge_gather(fm.as_grid())
        return FeatureMap.from_grid(self.reduction(self.norm(x)))


class PatchExpand(nn.Module):
    """(h, w, C) -> (2h, 2w, C/2): linear C -> 2C, then channel-to-space rearrange"""

    def __init__(self, dim: int):
        super().__init__()
        if dim % 2:
            raise ShapeError(f"Patch expansion needs an even channel count, got {dim}")
        self.expand = nn.Linear(dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(dim // 2)

    def forward(self, fm: FeatureMap) -> FeatureMap:
        x = expand_rearrange(self.expand(fm.as_grid()), 2)
        return FeatureMap.from_grid(self.norm(x))


class FinalExpand(nn.Module):
    """4x upsampling by expand-rearrange, then a per-pixel linear head"""

    def __init__(self, dim: int, out_chans: int, scale: int = 4):
        super().__init__()
        self.scale = scale
        self.expand = nn.Linear(dim, scale * scale * dim, bias=False)
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, out_chans)

    def forward(self, fm: FeatureMap) -> torch.Tensor:
        x = expand_rearrange(self.expand(fm.as_grid()), self.scale)
        return self.head(self.norm(x))
