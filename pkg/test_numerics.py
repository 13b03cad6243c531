import pytest
import torch
import torch.nn as nn

from conftest import toy_config
from mtlswin.arch import MtlSwinUnet
from mtlswin.errors import CheckpointError, NonDeterministicError, NonFiniteError, NumericsError
from mtlswin.losses import LossBatchInputs, compute_losses
from mtlswin.numerics import (
    forward_backward, gradcheck, load_checkpoint, precision, run_gradcheck_suite, save_checkpoint,
    seed_everything, state_hash,
)


def test_precision_restores_default_dtype():
    before = torch.get_default_dtype()
    with precision(torch.float64):
        assert torch.zeros(1).dtype == torch.float64
    assert torch.get_default_dtype() == before


def test_seed_everything_is_reproducible():
    seed_everything(5)
    a = torch.randn(4)
    seed_everything(5)
    assert torch.equal(a, torch.randn(4))


def test_forward_backward_sum_and_square(float64):
    x = nn.Parameter(torch.tensor([1.0, 2.0, 3.0]))
    grads = forward_backward((x * x).sum(), [("x", x)])
    assert torch.equal(grads["x"], torch.tensor([2.0, 4.0, 6.0]))

    y = nn.Parameter(torch.tensor([5.0, -1.0, 0.5]))
    grads = forward_backward(y.sum(), [("y", y)])
    assert torch.equal(grads["y"], torch.ones(3))


def test_forward_backward_does_not_accumulate(float64):
    x = nn.Parameter(torch.tensor([1.0, -2.0]))
    x.grad = torch.full((2,), 100.0)
    first = forward_backward((3 * x).sum(), [("x", x)])
    assert torch.equal(first["x"], torch.full((2,), 3.0))
    second = forward_backward((x * x).sum(), [("x", x)])
    assert torch.equal(second["x"], torch.tensor([2.0, -4.0]))


def test_forward_backward_skips_frozen_and_zero_fills_unreached():
    used = nn.Parameter(torch.ones(2))
    unused = nn.Parameter(torch.ones(3))
    frozen = nn.Parameter(torch.ones(2), requires_grad=False)
    grads = forward_backward((used * frozen).sum(), [("used", used), ("unused", unused), ("frozen", frozen)])
    assert set(grads) == {"used", "unused"}
    assert torch.equal(grads["unused"], torch.zeros(3))
    assert frozen.grad is None


def test_forward_backward_rejects_non_scalar_and_nan():
    p = nn.Parameter(torch.ones(2))
    with pytest.raises(NumericsError):
        forward_backward(p * 2, [("p", p)])
    with pytest.raises(NonFiniteError):
        forward_backward((p * float("nan")).sum(), [("p", p)])


def test_gradcheck_linear_is_exact():
    x = torch.randn(5, dtype=torch.float64)
    assert gradcheck(lambda t: t.sum(), x) == pytest.approx(0.0, abs=1e-9)


def test_gradcheck_requires_float64_and_valid_eps():
    with pytest.raises(NumericsError):
        gradcheck(lambda t: t.sum(), torch.randn(3))
    with pytest.raises(NumericsError):
        gradcheck(lambda t: t.sum(), torch.randn(3, dtype=torch.float64), eps=1e-1)


def test_gradcheck_detects_nondeterminism():
    calls = {"n": 0}

    def drifting(t):
        calls["n"] += 1
        return t.sum() + calls["n"]

    with pytest.raises(NonDeterministicError):
        gradcheck(drifting, torch.randn(3, dtype=torch.float64))


def test_gradcheck_dice_on_soft_predictions():
    from mtlswin.losses import dice_loss

    target = torch.tensor([1.0, 1.0, 0.0, 0.0, 1.0, 0.0], dtype=torch.float64)
    x = torch.randn(6, dtype=torch.float64)
    assert gradcheck(lambda t: dice_loss(target, torch.sigmoid(t)), x) < 1e-6


def test_primitive_suite_passes():
    report = run_gradcheck_suite(seed=0)
    assert len(report) >= 30
    assert len({r["primitive"] for r in report}) == 10
    assert all(r["error"] < 1e-5 for r in report), [r for r in report if not r["passed"]]


def test_full_loss_gradcheck_on_toy_model(float64):
    seed_everything(0)
    cfg = toy_config()
    model = MtlSwinUnet(cfg)
    images = torch.rand(2, 32, 32, 1)
    labels = torch.tensor([0, 1])
    masks = (torch.rand(2, 32, 32) > 0.7).double()
    present = torch.tensor([True, False])
    name = "cls_head.fc.weight"
    base = dict(model.named_parameters())[name].detach().clone()

    def loss_of(weight):
        params = {name: weight}
        outputs = torch.func.functional_call(model, params, (images,))
        inputs = LossBatchInputs(
            cls_logits=outputs.cls_logits, cls_labels=labels,
            seg_logits=outputs.seg_logits, seg_masks=masks, mask_present=present,
            rec_output=outputs.rec_image, rec_target=images,
        )
        return compute_losses(inputs, cfg.weights).total

    assert gradcheck(loss_of, base) < 1e-5

    embed = "encoder.patch_embed.proj.bias"
    embed_base = dict(model.named_parameters())[embed].detach().clone()

    def loss_of_embed(bias):
        outputs = torch.func.functional_call(model, {embed: bias}, (images,))
        inputs = LossBatchInputs(
            cls_logits=outputs.cls_logits, cls_labels=labels,
            seg_logits=outputs.seg_logits, seg_masks=masks, mask_present=present,
            rec_output=outputs.rec_image, rec_target=images,
        )
        return compute_losses(inputs, cfg.weights).total

    assert gradcheck(loss_of_embed, embed_base) < 1e-5


def test_checkpoint_roundtrip(tmp_path):
    tensors = {
        "w": torch.randn(3, 4),
        "d": torch.randn(2, dtype=torch.float64),
        "i": torch.arange(5),
        "b": torch.tensor([True, False]),
        "s": torch.tensor(2.5),
    }
    path = save_checkpoint(tmp_path / "a.ckpt", tensors, {"kind": "mtl", "epoch": 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"kind": "mtl", "epoch": 3}
    assert list(loaded) == list(tensors)
    for name, tensor in tensors.items():
        assert loaded[name].dtype == tensor.dtype
        assert torch.equal(loaded[name], tensor)
    assert state_hash(loaded) == state_hash(tensors)


def test_checkpoint_rejects_bad_header_and_truncation(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOT-A-CHECKPOINT\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)

    path = save_checkpoint(tmp_path / "t.ckpt", {"w": torch.randn(10)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_checkpoint_rejects_malformed_records(tmp_path):
    path = save_checkpoint(tmp_path / "ok.ckpt", {"w": torch.randn(2)}, {"epoch": 1})
    valid = path.read_bytes()
    header = valid.split(b"\n", 1)[0] + b"\n"

    cases = {
        "blank.ckpt": valid + b"\n",
        "length.ckpt": header + b"tensor w f32 2 xx\n",
        "shape.ckpt": header + b"tensor w f32 2,a 8\n" + bytes(8),
        "meta_length.ckpt": header + b"meta many\n",
        "meta_blob.ckpt": header + b"meta 5\n{oops",
    }
    for name, content in cases.items():
        bad = tmp_path / name
        bad.write_bytes(content)
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)


def test_state_hash_tracks_changes():
    layer = nn.Linear(3, 2)
    before = state_hash(layer)
    assert state_hash(layer) == before
    with torch.no_grad():
        layer.bias.add_(1.0)
    assert state_hash(layer) != before
