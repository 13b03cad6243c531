import numpy as np
import pandas as pd
import pytest
from sklearn.metrics import roc_auc_score

from mtlswin.config import GeneratorConfig, build
from mtlswin.data import (
    LesionPose, SliceDataset, SyntheticCTGenerator, _ellipse_radius, augment, cue_only_scores, d4_transform,
    generate_dataset, load_dataset, load_splits, make_loader, save_dataset,
)
from mtlswin.errors import ConfigError, DatasetError


def test_split_sizes_and_disjointness(small_dataset):
    samples, splits = small_dataset
    sizes = {name: len(idx) for name, idx in splits.by_split().items()}
    assert sizes == {"train": 40, "val": 8, "test_in": 8, "test_shift": 8}
    seen = [i for idx in splits.by_split().values() for i in idx]
    assert len(seen) == len(set(seen))

    assert {samples[i].hospital_id for i in splits.test_in} == {1}
    assert {samples[i].hospital_id for i in splits.val} == {1}
    assert {samples[i].hospital_id for i in splits.train} <= {1, 2, 3, 4}
    assert all(samples[i].hospital_id >= 5 for i in splits.test_shift)


def test_shift_split_has_new_patients_and_matched_ratio(small_dataset):
    samples, splits = small_dataset
    train_patients = {samples[i].patient_id for i in splits.train}
    assert not train_patients & {samples[i].patient_id for i in splits.test_shift}
    positives_in = sum(samples[i].label for i in splits.test_in)
    assert sum(samples[i].label for i in splits.test_shift) == positives_in


def test_masks_only_where_annotated(small_dataset):
    samples, _ = small_dataset
    for s in samples:
        if s.hospital_id > 4:
            assert s.mask is None
        elif s.lesion_box is not None:
            assert s.mask is not None and s.mask.any()
            rows, cols = np.nonzero(s.mask)
            assert (rows.min(), cols.min(), rows.max(), cols.max()) == s.lesion_box
        else:
            assert s.mask is None
    assert any(s.mask is not None for s in samples)


def test_positive_lesion_core_is_darker_than_rim():
    gen = SyntheticCTGenerator(GeneratorConfig(image_size=64))
    rng = np.random.default_rng(0)
    for kind in ("positive", "other"):
        pose = LesionPose(row=32, col=32, axis_a=9.0, axis_b=7.0, angle=0.4, kind=kind)
        image, support, _ = gen.render(rng, pose, cue=1, hospital_id=2)
        radius = _ellipse_radius(gen.rows, gen.cols, pose.row, pose.col, pose.axis_a, pose.axis_b, pose.angle)
        core = image[..., 0][(support == 1) & (radius < 0.5)]
        rim = image[..., 0][(support == 1) & (radius > 0.6)]
        assert core.size and rim.size
        if kind == "positive":
            assert core.max() < rim.min()
        else:
            assert core.min() > 0.6 and rim.min() > 0.6


def test_skull_ring_thickness_follows_cue():
    gen = SyntheticCTGenerator(GeneratorConfig(image_size=64))
    assert (gen.ring_thickness(0), gen.ring_thickness(1)) == (2, 4)
    pose = LesionPose(row=32, col=32, axis_a=1, axis_b=1, angle=0, kind="none")
    thin, _, _ = gen.render(np.random.default_rng(1), pose, cue=0, hospital_id=5)
    thick, _, _ = gen.render(np.random.default_rng(1), pose, cue=1, hospital_id=5)
    assert (thick > 0.85).sum() > (thin > 0.85).sum()


def test_patient_slices_share_lesion_pose(small_dataset):
    samples, _ = small_dataset
    by_patient = {}
    for s in samples:
        by_patient.setdefault(s.patient_id, []).append(s)
    checked = 0
    for slices in by_patient.values():
        assert len({s.label for s in slices}) == 1
        centers = [s.lesion_center for s in slices if s.lesion_center is not None]
        if len(centers) > 1:
            rows, cols = zip(*centers)
            assert max(rows) - min(rows) <= 2 and max(cols) - min(cols) <= 2
            checked += 1
    assert checked > 0


def test_file_names_are_unique(small_dataset):
    samples, _ = small_dataset
    assert len({s.file for s in samples}) == len(samples)
    assert samples[0].file.startswith("H01P0000_s")


def cue_label_corr(samples):
    cues = np.array([s.cue for s in samples], dtype=float)
    labels = np.array([s.label for s in samples], dtype=float)
    return np.corrcoef(cues, labels)[0, 1]


@pytest.mark.slow
def test_cue_correlation_matches_rho():
    gen = SyntheticCTGenerator(GeneratorConfig(image_size=32, slices_per_patient=1))
    rng = np.random.default_rng(11)
    assert abs(cue_label_corr(gen.hospital_samples(rng, 2, 10000)) - 0.9) < 0.05
    assert abs(cue_label_corr(gen.hospital_samples(rng, 7, 10000))) < 0.05


def test_cue_only_classifier_fails_under_shift():
    gen = SyntheticCTGenerator(GeneratorConfig(image_size=32, slices_per_patient=1))
    rng = np.random.default_rng(12)
    annotated = gen.hospital_samples(rng, 3, 2000)
    shifted = gen.hospital_samples(rng, 9, 2000)
    auc_in = roc_auc_score([s.label for s in annotated], cue_only_scores(annotated))
    auc_shift = roc_auc_score([s.label for s in shifted], cue_only_scores(shifted))
    assert auc_in > 0.9
    assert abs(auc_shift - 0.5) < 0.06


def test_generation_is_deterministic(small_gen_cfg, small_dataset):
    samples, splits = small_dataset
    again, again_splits = generate_dataset(small_gen_cfg)
    assert again_splits == splits
    assert all(np.array_equal(a.image, b.image) for a, b in zip(samples, again))


def test_invalid_generator_config():
    with pytest.raises(ConfigError):
        build(GeneratorConfig, {"rho_train": 1.5})
    with pytest.raises(ConfigError):
        build(GeneratorConfig, {"image_size": 48})
    with pytest.raises(ConfigError):
        build(GeneratorConfig, {"brightness_offsets": "0.1,0.2"})


def test_infeasible_shift_split_raises():
    cfg = GeneratorConfig(image_size=32, train_count=8, val_count=4, test_count=50, shift_pool_per_hospital=2)
    with pytest.raises(DatasetError):
        generate_dataset(cfg)


def test_d4_examples():
    x = np.arange(12.0).reshape(3, 4)
    assert np.array_equal(d4_transform(x, 2, "horizontal"), np.flipud(x))
    assert np.array_equal(d4_transform(x, 0, "vertical"), np.flipud(x))
    assert np.array_equal(d4_transform(x, 1, "horizontal"), np.fliplr(np.rot90(x)))


def test_d4_preserves_mask_counts():
    rng = np.random.default_rng(0)
    mask = (rng.random((16, 16)) > 0.7).astype(np.uint8)
    for k in range(4):
        for flip in ("vertical", "horizontal"):
            assert d4_transform(mask, k, flip).sum() == mask.sum()


def blob(rng, size=64):
    rows, cols = np.mgrid[0:size, 0:size] + 0.5
    center = size / 2 + rng.uniform(-4, 4, size=2)
    radius = _ellipse_radius(rows, cols, center[0], center[1], rng.uniform(12, 20), rng.uniform(12, 20),
                             rng.uniform(0, np.pi))
    return (radius < 1).astype(np.uint8)


def test_augment_keeps_mask_area_and_binary_values():
    rng = np.random.default_rng(1)
    for seed in range(100):
        mask = blob(rng)
        image = rng.random((64, 64, 1)).astype(np.float32)
        out_image, out_mask = augment(image, mask, seed=seed)
        assert out_image.shape == image.shape and out_mask.shape == mask.shape
        assert set(np.unique(out_mask)) <= {0, 1}
        assert abs(int(out_mask.sum()) - int(mask.sum())) <= 0.02 * mask.sum()
        assert out_image.min() >= 0.0 and out_image.max() <= 1.0


def test_augment_is_identity_about_a_quarter_of_the_time():
    image = np.random.default_rng(2).random((32, 32, 1)).astype(np.float32)
    unchanged = sum(np.array_equal(augment(image, seed=s)[0], image) for s in range(400))
    assert 0.15 < unchanged / 400 < 0.35


def test_augment_is_seeded():
    rng = np.random.default_rng(3)
    image, mask = rng.random((32, 32, 1)).astype(np.float32), blob(rng, 32)
    a = augment(image, mask, seed=[0, 1, 2])
    b = augment(image, mask, seed=[0, 1, 2])
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert augment(image, None, seed=5)[1] is None


def test_save_load_roundtrip(tmp_path, small_dataset):
    samples, splits = small_dataset
    save_dataset(samples, tmp_path, splits)
    loaded = load_dataset(tmp_path)
    assert len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        assert np.array_equal(a.image, b.image)
        assert (a.label, a.hospital_id, a.patient_id, a.file) == (b.label, b.hospital_id, b.patient_id, b.file)
        assert (a.mask is None) == (b.mask is None)
        if a.mask is not None:
            assert np.array_equal(a.mask, b.mask)
        assert (a.cue, a.lesion_box) == (b.cue, b.lesion_box)
    assert load_splits(tmp_path, loaded) == splits
    assert np.array_equal(cue_only_scores(loaded), cue_only_scores(samples))

    shifted_positives = [s for s in loaded if s.hospital_id > 4 and s.label == 1]
    assert shifted_positives
    assert all(s.mask is None and s.lesion_box is not None for s in shifted_positives)


def test_load_accepts_five_column_index(tmp_path, small_dataset):
    samples, splits = small_dataset
    save_dataset(samples, tmp_path, splits)
    index = pd.read_csv(tmp_path / "index.csv", dtype=str, keep_default_na=False)
    index[["file", "mask_file", "label", "hospital_id", "patient_id"]].to_csv(tmp_path / "index.csv", index=False)

    loaded = load_dataset(tmp_path)
    assert all(s.cue is None for s in loaded)
    for a, b in zip(samples, loaded):
        if a.mask is not None:
            assert b.lesion_box == a.lesion_box


def test_saved_dataset_is_byte_identical(tmp_path, small_gen_cfg):
    for name in ("a", "b"):
        samples, splits = generate_dataset(small_gen_cfg)
        save_dataset(samples, tmp_path / name, splits)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_load_rejects_missing_mask_and_bad_hospital(tmp_path, small_dataset):
    samples, splits = small_dataset
    save_dataset(samples, tmp_path, splits)
    index = pd.read_csv(tmp_path / "index.csv", dtype=str, keep_default_na=False)

    masked = index[index.mask_file != "none"].iloc[0]
    (tmp_path / "masks" / masked.mask_file).unlink()
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)

    index.loc[:, "mask_file"] = "none"
    index.loc[0, "hospital_id"] = "12"
    index.to_csv(tmp_path / "index.csv", index=False)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path)

    with pytest.raises(DatasetError):
        load_dataset(tmp_path / "nowhere")


def test_slice_dataset_items(small_dataset):
    samples, _ = small_dataset
    dataset = SliceDataset(samples[:6], augment=True, seed=1)
    item = dataset[0]
    assert item["image"].shape == (32, 32, 1)
    assert item["mask"].shape == (32, 32)
    assert bool(item["mask_present"]) == (samples[0].mask is not None)
    unmasked = next(i for i, s in enumerate(samples[:6] + samples[-6:]) if s.mask is None)
    plain = SliceDataset(samples[:6] + samples[-6:])[unmasked]
    assert not plain["mask_present"] and plain["mask"].sum() == 0


def test_make_loader_batches_in_order(small_dataset):
    samples, _ = small_dataset
    batches = list(make_loader(samples[:10], batch=4))
    assert [len(b["label"]) for b in batches] == [4, 4, 2]
    assert batches[0]["index"].tolist() == [0, 1, 2, 3]
