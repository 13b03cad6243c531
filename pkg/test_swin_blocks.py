import pytest
import torch

from mtlswin.errors import ShapeError
from mtlswin.numerics import gradcheck, seed_everything
from mtlswin.swin_blocks import (
    FeatureMap, FinalExpand, PatchEmbed, PatchExpand, PatchMerging, StageConfig, SwinBlock, WindowAttention,
    expand_rearrange, init_weights, merge_gather, relative_position_index, shifted_window_mask, window_partition,
    window_reverse,
)


def test_patch_embed_shapes():
    embed = PatchEmbed(patch_size=4, in_chans=1, embed_dim=8)
    fm = embed(torch.rand(2, 8, 8, 1))
    assert fm.grid == (2, 2)
    assert fm.tokens.shape == (2, 4, 8)


def test_patch_embed_reference_grid():
    fm = PatchEmbed(4, 1, 96)(torch.rand(1, 224, 224, 1))
    assert fm.grid == (56, 56)
    assert fm.channels == 96


def test_patch_embed_zero_image_gives_projected_bias():
    embed = PatchEmbed(4, 1, 8)
    with torch.no_grad():
        embed.proj.bias.copy_(torch.linspace(-1, 1, 8))
        fm = embed(torch.zeros(1, 8, 8, 1))
        expected = embed.norm(embed.proj.bias)
    assert torch.allclose(fm.tokens, expected.expand_as(fm.tokens))


def test_feature_map_rejects_grid_mismatch():
    with pytest.raises(ShapeError):
        FeatureMap(torch.zeros(1, 5, 4), (2, 2))


def test_window_partition_roundtrip_is_exact():
    x = torch.randn(2, 8, 12, 3)
    windows = window_partition(x, 4)
    assert windows.shape == (2 * 2 * 3, 16, 3)
    assert torch.equal(window_reverse(windows, 4, 8, 12), x)


def test_window_count_at_reference_scale():
    windows = window_partition(torch.zeros(1, 56, 56, 1), 7)
    assert windows.shape == (64, 49, 1)


def test_cyclic_shift_then_inverse_is_identity():
    x = torch.arange(64.0).reshape(1, 8, 8, 1)
    rolled = torch.roll(torch.roll(x, (-2, -2), (1, 2)), (2, 2), (1, 2))
    assert torch.equal(rolled, x)


def test_relative_position_index_range():
    index = relative_position_index(7)
    assert index.shape == (49, 49)
    assert index.min() == 0
    assert index.max() == 13 * 13 - 1
    assert torch.all(index.diagonal() == index[0, 0])


def test_shifted_window_mask_structure():
    mask = shifted_window_mask((8, 8), 4, 2)
    assert mask.shape == (4, 16, 16)
    assert torch.all(mask.diagonal(dim1=1, dim2=2) == 0)
    assert torch.all(mask[0] == 0)
    assert torch.isinf(mask[3]).any()
    assert torch.equal(mask, mask.transpose(1, 2))


def dense_attention(attn: WindowAttention, x: torch.Tensor) -> torch.Tensor:
    """Plain per-head softmax(q k^T / sqrt(d) + bias) v over all tokens"""
    n, c = x.shape
    heads = attn.heads
    d = c // heads
    w_qkv, b_qkv = attn.qkv.weight, attn.qkv.bias
    bias = attn.position_bias()
    outputs = []
    for h in range(heads):
        q = x @ w_qkv[h * d:(h + 1) * d].T + b_qkv[h * d:(h + 1) * d]
        k = x @ w_qkv[c + h * d:c + (h + 1) * d].T + b_qkv[c + h * d:c + (h + 1) * d]
        v = x @ w_qkv[2 * c + h * d:2 * c + (h + 1) * d].T + b_qkv[2 * c + h * d:2 * c + (h + 1) * d]
        logits = q @ k.T / d ** 0.5 + bias[h]
        weights = torch.exp(logits - logits.max(dim=-1, keepdim=True).values)
        weights = weights / weights.sum(dim=-1, keepdim=True)
        outputs.append(weights @ v)
    return torch.cat(outputs, dim=-1) @ attn.proj.weight.T + attn.proj.bias


def test_single_window_attention_matches_dense_oracle(float64):
    seed_everything(1)
    block = SwinBlock(dim=8, heads=2, window=4, shift=0)
    block.apply(init_weights)
    x = torch.randn(1, 4, 4, 8)
    out = block.attend(x)
    expected = dense_attention(block.attn, x.reshape(16, 8))
    assert torch.allclose(out.reshape(16, 8), expected, atol=1e-5)


def test_shifted_attention_zeroes_cross_boundary_weights():
    seed_everything(2)
    block = SwinBlock(dim=8, heads=2, window=4, shift=2)
    _, attn = block.attend(torch.randn(1, 8, 8, 8), return_attention=True)
    mask = shifted_window_mask((8, 8), 4, 2)
    blocked = torch.isinf(mask).unsqueeze(1).expand(-1, 2, -1, -1)
    assert torch.all(attn[blocked] == 0)
    assert torch.allclose(attn.sum(dim=-1), torch.ones(attn.shape[:-1]), atol=1e-6)


def test_swin_block_rejects_bad_shift_and_grid():
    with pytest.raises(ShapeError):
        SwinBlock(dim=8, heads=2, window=4, shift=1)
    block = SwinBlock(dim=8, heads=2, window=4)
    with pytest.raises(ShapeError):
        block.attend(torch.randn(1, 6, 6, 8))


def test_stage_config_shift_rules():
    cfg = StageConfig(depth=2, heads=3, window=7)
    assert cfg.shift_for(0, 56) == 0
    assert cfg.shift_for(1, 56) == 3
    assert cfg.shift_for(1, 7) == 0


def test_merge_gather_order():
    x = torch.arange(16.0).reshape(1, 4, 4, 1)
    out = merge_gather(x)
    assert out.shape == (1, 2, 2, 4)
    assert out[0, 0, 0].tolist() == [0.0, 4.0, 1.0, 5.0]


def test_patch_merging_depends_on_its_two_by_two_block():
    x = torch.randn(1, 4, 4, 3)
    base = merge_gather(x)
    bumped = x.clone()
    bumped[0, 3, 2, 1] += 1.0
    changed = (merge_gather(bumped) != base).any(dim=-1)[0]
    assert changed.nonzero().tolist() == [[1, 1]]


def test_patch_merge_and_expand_shapes():
    fm = FeatureMap(torch.randn(2, 4, 8), (2, 2))
    merged = PatchMerging(8)(fm)
    assert merged.grid == (1, 1) and merged.channels == 16
    expanded = PatchExpand(16)(merged)
    assert expanded.grid == (2, 2) and expanded.channels == 8
    assert expanded.tokens.shape == fm.tokens.shape


def test_reference_merge_and_expand_shapes():
    merged = PatchMerging(96)(FeatureMap(torch.randn(1, 56 * 56, 96), (56, 56)))
    assert merged.grid == (28, 28) and merged.channels == 192
    expanded = PatchExpand(768)(FeatureMap(torch.randn(1, 49, 768), (7, 7)))
    assert expanded.grid == (14, 14) and expanded.channels == 384


def test_expand_rearrange_is_a_bijection():
    x = torch.arange(16.0).reshape(1, 1, 1, 16)
    out = expand_rearrange(x, 2)
    assert out.shape == (1, 2, 2, 4)
    assert sorted(out.flatten().tolist()) == x.flatten().tolist()
    assert out[0, 0, 1].tolist() == [4.0, 5.0, 6.0, 7.0]


def test_patch_expand_rejects_odd_channels():
    with pytest.raises(ShapeError):
        PatchExpand(7)


def test_final_expand_shapes():
    fm = FeatureMap(torch.randn(1, 4, 8), (2, 2))
    assert FinalExpand(8, 2)(fm).shape == (1, 8, 8, 2)
    assert FinalExpand(8, 1)(fm).shape == (1, 8, 8, 1)


def test_final_expand_gradcheck(float64):
    seed_everything(4)
    head = FinalExpand(4, 2)
    weights = torch.randn(1, 8, 8, 2)

    def f(tokens):
        return (head(FeatureMap(tokens, (2, 2))) * weights).sum()

    assert gradcheck(f, torch.randn(1, 4, 4)) < 1e-5
