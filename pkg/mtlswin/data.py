"""
Synthetic spurious-correlation CT-slice dataset.

Positives carry an elliptical lesion with a darker core; negatives carry no
lesion or a uniform one. Every slice has a bright skull ring whose thickness
and background grain follow a "scanner cue" that correlates with the label at
rho_train in hospitals 1-4 and at rho_shift in hospitals 5-11.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from loguru import logger
from PIL import Image
from scipy import ndimage
from torch.utils.data import DataLoader, Dataset

from mtlswin.config import ANNOTATED_HOSPITALS, NUM_HOSPITALS, GeneratorConfig, settings
from mtlswin.errors import DatasetError

INDEX_COLUMNS = ["file", "mask_file", "label", "hospital_id", "patient_id"]
# Optional trailing columns: scanner cue and lesion box (empty when absent)
EXTRA_COLUMNS = ["cue", "box_row0", "box_col0", "box_row1", "box_col1"]
SPLITS = ("train", "val", "test_in", "test_shift")
NO_MASK = "none"

# Intensities before hospital offsets
SKULL_LEVEL = 0.95
TISSUE_LEVEL = 0.45
LESION_RIM_LEVEL = 0.80
LESION_CORE_LEVEL = 0.30
CORE_FRACTION = 0.55
GRAIN_STD = {0: 0.02, 1: 0.05}


@dataclass
class Sample:
    image: np.ndarray                      # (H, W, 1) float32, multiples of 1/255
    label: int                             # 1 = hypodense lesion
    mask: Optional[np.ndarray]             # (H, W) uint8 in {0, 1}
    hospital_id: int
    patient_id: str
    file: str = ""
    cue: Optional[int] = None
    lesion_box: Optional[Tuple[int, int, int, int]] = None   # (row0, col0, row1, col1), inclusive
    lesion_center: Optional[Tuple[float, float]] = None

    @property
    def has_mask(self) -> bool:
        return self.mask is not None


@dataclass
class SplitSpec:
    train: List[int] = field(default_factory=list)
    val: List[int] = field(default_factory=list)
    test_in: List[int] = field(default_factory=list)
    test_shift: List[int] = field(default_factory=list)

    def by_split(self) -> Dict[str, List[int]]:
        return {name: getattr(self, name) for name in SPLITS}

    def select(self, samples: Sequence[Sample], split: str) -> List[Sample]:
        return [samples[i] for i in getattr(self, split)]


@dataclass
class LesionPose:
    row: float
    col: float
    axis_a: float
    axis_b: float
    angle: float
    kind: str           # "positive", "other", "none"


def _ellipse_radius(rows, cols, row, col, a, b, angle):
    """Normalised elliptical radius; < 1 inside the ellipse"""
    dr, dc = rows - row, cols - col
    cos, sin = np.cos(angle), np.sin(angle)
    u = dc * cos + dr * sin
    v = -dc * sin + dr * cos
    return np.sqrt((u / a) ** 2 + (v / b) ** 2)


class SyntheticCTGenerator:
    """Renders slices and assembles the hospital splits"""

    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        size = cfg.image_size
        self.rows, self.cols = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    def ring_thickness(self, cue: int) -> int:
        size = self.cfg.image_size
        return max(1, size // 32) if cue == 0 else max(2, size // 16)

    def draw_pose(self, rng: np.random.Generator, kind: str) -> LesionPose:
        size = self.cfg.image_size
        return LesionPose(
            row=size / 2 + rng.uniform(-0.18, 0.18) * size,
            col=size / 2 + rng.uniform(-0.16, 0.16) * size,
            axis_a=rng.uniform(0.09, 0.15) * size,
            axis_b=rng.uniform(0.07, 0.12) * size,
            angle=rng.uniform(0, np.pi),
            kind=kind,
        )

    def render(
        self, rng: np.random.Generator, pose: LesionPose, cue: int, hospital_id: int
    ) -> Tuple[np.ndarray, np.ndarray, Optional[Tuple[int, int, int, int]]]:
        """Returns (image (H, W, 1), lesion support (H, W), lesion box)"""
        size = self.cfg.image_size
        offset = self.cfg.brightness_offsets[hospital_id - 1]
        head_a, head_b = 0.44 * size, 0.38 * size
        head = _ellipse_radius(self.rows, self.cols, size / 2, size / 2, head_b, head_a, 0.0)
        inner = 1.0 - self.ring_thickness(cue) / head_b

        image = np.zeros((size, size), dtype=np.float64)
        brain = head < inner
        image[(head >= inner) & (head < 1.0)] = SKULL_LEVEL
        image[brain] = TISSUE_LEVEL + offset

        support = np.zeros((size, size), dtype=np.uint8)
        box = None
        if pose.kind != "none":
            radius = _ellipse_radius(self.rows, self.cols, pose.row, pose.col, pose.axis_a, pose.axis_b, pose.angle)
            lesion = (radius < 1.0) & brain
            image[lesion] = LESION_RIM_LEVEL + offset
            if pose.kind == "positive":
                image[lesion & (radius < CORE_FRACTION)] = LESION_CORE_LEVEL + offset
            support = lesion.astype(np.uint8)
            if support.any():
                rows, cols = np.nonzero(support)
                box = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))

        std = GRAIN_STD[cue]
        grain = np.clip(rng.normal(0.0, std, size=(size, size)), -2.5 * std, 2.5 * std)
        image = np.where(head < 1.0, image + grain, image)
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0
        return image.astype(np.float32)[..., None], support, box

    def patient_samples(
        self, rng: np.random.Generator, hospital_id: int, patient_id: str, n_slices: int, rho: float
    ) -> List[Sample]:
        cfg = self.cfg
        draw = rng.random()
        kind = "positive" if draw < cfg.p_positive else ("other" if draw < cfg.p_positive + cfg.p_other_blob else "none")
        label = int(kind == "positive")
        pose = self.draw_pose(rng, kind)

        samples = []
        for s in range(n_slices):
            # Slices share the pose up to a one-pixel jitter and a scale change
            scale = rng.uniform(0.85, 1.1)
            slice_pose = LesionPose(
                row=pose.row + rng.integers(-1, 2), col=pose.col + rng.integers(-1, 2),
                axis_a=pose.axis_a * scale, axis_b=pose.axis_b * scale, angle=pose.angle, kind=kind,
            )
            cue = label if rng.random() < rho else int(rng.random() < cfg.p_positive)
            image, support, box = self.render(rng, slice_pose, cue, hospital_id)
            annotated = hospital_id in ANNOTATED_HOSPITALS and kind != "none" and support.any()
            samples.append(Sample(
                image=image, label=label, mask=support if annotated else None,
                hospital_id=hospital_id, patient_id=patient_id,
                file=f"{patient_id}_s{s:02d}.pgm", cue=cue, lesion_box=box,
                lesion_center=(slice_pose.row, slice_pose.col) if kind != "none" else None,
            ))
        return samples

    def hospital_samples(self, rng: np.random.Generator, hospital_id: int, count: int) -> List[Sample]:
        rho = self.cfg.rho_train if hospital_id in ANNOTATED_HOSPITALS else self.cfg.rho_shift
        samples: List[Sample] = []
        k = 0
        while len(samples) < count:
            n = min(self.cfg.slices_per_patient, count - len(samples))
            samples.extend(self.patient_samples(rng, hospital_id, f"H{hospital_id:02d}P{k:04d}", n, rho))
            k += 1
        return samples

    def hospital_counts(self) -> Dict[int, int]:
        cfg = self.cfg
        h1_train = int(round(cfg.train_count * cfg.hospital1_train_fraction))
        counts = {1: h1_train + cfg.val_count + cfg.test_count}
        rest = cfg.train_count - h1_train
        for i, h in enumerate((2, 3, 4)):
            counts[h] = rest // 3 + (1 if i < rest % 3 else 0)
        for h in range(5, NUM_HOSPITALS + 1):
            counts[h] = cfg.shift_pool_per_hospital
        return counts

    def generate(self) -> Tuple[List[Sample], SplitSpec]:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        samples: List[Sample] = []
        by_hospital: Dict[int, List[int]] = {}
        for hospital_id, count in self.hospital_counts().items():
            start = len(samples)
            samples.extend(self.hospital_samples(rng, hospital_id, count))
            by_hospital[hospital_id] = list(range(start, len(samples)))

        splits = SplitSpec()
        h1 = list(rng.permutation(by_hospital[1]))
        splits.test_in = sorted(int(i) for i in h1[:cfg.test_count])
        splits.val = sorted(int(i) for i in h1[cfg.test_count:cfg.test_count + cfg.val_count])
        splits.train = sorted(
            [int(i) for i in h1[cfg.test_count + cfg.val_count:]]
            + [i for h in (2, 3, 4) for i in by_hospital[h]]
        )

        positive_ratio = np.mean([samples[i].label for i in splits.test_in])
        n_pos = int(round(cfg.test_count * positive_ratio))
        pool = [i for h in range(5, NUM_HOSPITALS + 1) for i in by_hospital[h]]
        pos = [i for i in pool if samples[i].label == 1]
        neg = [i for i in pool if samples[i].label == 0]
        if len(pos) < n_pos or len(neg) < cfg.test_count - n_pos:
            raise DatasetError(
                f"Hospitals 5-11 hold {len(pos)} positives / {len(neg)} negatives; "
                f"need {n_pos} / {cfg.test_count - n_pos} to match the in-distribution test ratio"
            )
        chosen = list(rng.choice(pos, n_pos, replace=False)) + list(rng.choice(neg, cfg.test_count - n_pos, replace=False))
        splits.test_shift = sorted(int(i) for i in chosen)

        logger.info(
            f"Generated {len(samples)} slices: "
            + ", ".join(f"{name}={len(idx)}" for name, idx in splits.by_split().items())
        )
        return samples, splits


def generate_dataset(cfg: GeneratorConfig) -> Tuple[List[Sample], SplitSpec]:
    return SyntheticCTGenerator(cfg).generate()


def cue_only_scores(samples: Sequence[Sample]) -> np.ndarray:
    """Scores of a classifier that reads only the scanner cue"""
    return np.array([float(s.cue) for s in samples])


def d4_transform(x: np.ndarray, k: int, flip: str) -> np.ndarray:
    """Rotate by k*90 degrees, then flip 'vertical' (rows) or 'horizontal' (columns)"""
    x = np.rot90(x, k, axes=(0, 1))
    x = np.flip(x, axis=0 if flip == "vertical" else 1)
    return np.ascontiguousarray(x)


def augment(
    image: np.ndarray, mask: Optional[np.ndarray] = None, seed: Union[int, Sequence[int]] = 0
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Two independent ops, each firing with probability 0.5:
    a right-angle rotation followed by a vertical or horizontal flip, and a
    rotation within [-20, 20] degrees. Image and mask get the same transform.
    """
    rng = np.random.default_rng(seed)
    fire_d4, fire_rotate = rng.random() < 0.5, rng.random() < 0.5
    k = int(rng.integers(4))
    flip = "vertical" if rng.random() < 0.5 else "horizontal"
    angle = float(rng.uniform(-20.0, 20.0))

    if fire_d4:
        image = d4_transform(image, k, flip)
        mask = d4_transform(mask, k, flip) if mask is not None else None
    if fire_rotate:
        image = ndimage.rotate(image, angle, axes=(0, 1), reshape=False, order=1, mode="reflect")
        image = np.clip(image, 0.0, 1.0).astype(np.float32)
        if mask is not None:
            mask = ndimage.rotate(mask, angle, axes=(0, 1), reshape=False, order=0, mode="reflect")
    return image, mask


def _write_pgm(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array.astype(np.uint8)).save(path, format="PPM")


def _read_pgm(path: Path) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"Missing file: {path}")
    with Image.open(path) as img:
        return np.array(img.convert("L"), dtype=np.uint8)


def save_dataset(samples: Sequence[Sample], root: Union[str, Path], splits: Optional[SplitSpec] = None) -> Path:
    """Write images/masks as 8-bit PGM plus index.csv (and splits.csv when given)"""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rows = []
    for sample in samples:
        _write_pgm(root / "images" / sample.file, np.round(sample.image[..., 0] * 255.0))
        mask_file = NO_MASK
        if sample.mask is not None:
            mask_file = sample.file
            _write_pgm(root / "masks" / mask_file, sample.mask * 255)
        cue = "" if sample.cue is None else int(sample.cue)
        box = list(sample.lesion_box) if sample.lesion_box is not None else [""] * 4
        rows.append([sample.file, mask_file, sample.label, sample.hospital_id, sample.patient_id, cue, *box])
    pd.DataFrame(rows, columns=INDEX_COLUMNS + EXTRA_COLUMNS).to_csv(root / "index.csv", index=False)

    if splits is not None:
        split_rows = [(samples[i].file, name) for name, idx in splits.by_split().items() for i in idx]
        pd.DataFrame(split_rows, columns=["file", "split"]).to_csv(root / "splits.csv", index=False)
    logger.info(f"Saved {len(samples)} samples to {root}")
    return root


def load_dataset(root: Union[str, Path]) -> List[Sample]:
    root = Path(root)
    index_path = root / "index.csv"
    if not index_path.is_file():
        raise DatasetError(f"No index.csv in {root}")
    index = pd.read_csv(index_path, dtype=str, keep_default_na=False)
    if list(index.columns) not in (INDEX_COLUMNS, INDEX_COLUMNS + EXTRA_COLUMNS):
        raise DatasetError(f"index.csv columns {list(index.columns)} != {INDEX_COLUMNS} (+ {EXTRA_COLUMNS})")
    extras = list(index.columns) == INDEX_COLUMNS + EXTRA_COLUMNS

    samples = []
    for row in index.itertuples(index=False):
        try:
            label, hospital_id = int(row.label), int(row.hospital_id)
            cue = int(row.cue) if extras and row.cue != "" else None
            corners = [row.box_row0, row.box_col0, row.box_row1, row.box_col1] if extras else [""]
            stored_box = tuple(int(v) for v in corners) if all(v != "" for v in corners) else None
        except (TypeError, ValueError) as e:
            raise DatasetError(f"Malformed index row for {row.file!r}: {e}") from e
        if label not in (0, 1):
            raise DatasetError(f"Label {label} out of range for {row.file}")
        if not 1 <= hospital_id <= NUM_HOSPITALS:
            raise DatasetError(f"Hospital {hospital_id} out of range for {row.file}")

        pixels = _read_pgm(root / "images" / row.file)
        mask = None
        if row.mask_file != NO_MASK:
            mask = (_read_pgm(root / "masks" / row.mask_file) > 127).astype(np.uint8)
            if mask.shape != pixels.shape:
                raise DatasetError(f"Image/mask size mismatch for {row.file}: {pixels.shape} vs {mask.shape}")
        box = stored_box
        if box is None and mask is not None and mask.any():
            rows, cols = np.nonzero(mask)
            box = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
        samples.append(Sample(
            image=(pixels.astype(np.float64) / 255.0).astype(np.float32)[..., None], label=label, mask=mask,
            hospital_id=hospital_id, patient_id=row.patient_id, file=row.file, cue=cue, lesion_box=box,
        ))
    return samples


def load_splits(root: Union[str, Path], samples: Sequence[Sample]) -> SplitSpec:
    path = Path(root) / "splits.csv"
    if not path.is_file():
        raise DatasetError(f"No splits.csv in {root}")
    position = {s.file: i for i, s in enumerate(samples)}
    splits = SplitSpec()
    for row in pd.read_csv(path, dtype=str).itertuples(index=False):
        if row.split not in SPLITS or row.file not in position:
            raise DatasetError(f"Bad split row: {row.file}, {row.split}")
        getattr(splits, row.split).append(position[row.file])
    return splits


class SliceDataset(Dataset):
    """Torch view over samples with seeded per-sample augmentation"""

    def __init__(self, samples: Sequence[Sample], augment: bool = False, seed: int = 0):
        self.samples = list(samples)
        self.augment = augment
        self.seed = seed
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        sample = self.samples[idx]
        image, mask = sample.image, sample.mask
        if self.augment:
            image, mask = augment(image, mask, seed=[self.seed, self.epoch, idx])
        size = image.shape[:2]
        dtype = torch.get_default_dtype()
        return {
            "image": torch.as_tensor(np.ascontiguousarray(image), dtype=dtype),
            "label": torch.tensor(sample.label, dtype=torch.long),
            "mask": torch.as_tensor(np.ascontiguousarray(mask), dtype=dtype) if mask is not None else torch.zeros(size, dtype=dtype),
            "mask_present": torch.tensor(mask is not None),
            "index": torch.tensor(idx),
        }


def make_loader(
    samples: Sequence[Sample], batch: int, shuffle: bool = False, augment: bool = False, seed: int = 0
) -> DataLoader:
    """Ordered batch producer; workers capped by MTLSWIN_THREADS"""
    generator = torch.Generator().manual_seed(seed)
    workers = settings.THREADS - 1 if settings.THREADS > 1 else 0
    return DataLoader(
        SliceDataset(samples, augment=augment, seed=seed),
        batch_size=batch, shuffle=shuffle, generator=generator, num_workers=workers, drop_last=False,
    )
