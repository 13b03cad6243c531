"""
Covariate-shift trend experiment: several task sets trained on the same
synthetic dataset over several seeds, compared on in-distribution and
shifted test AUC.
"""

from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from loguru import logger

from mtlswin.analysis.metrics import evaluate_splits
from mtlswin.config import ModelConfig, TrainConfig, training_family
from mtlswin.data import Sample, SplitSpec
from mtlswin.train import train_joint_pipeline, train_mtl

# name -> (task list, model family, encoder variant)
TREND_MODELS: Dict[str, Tuple[List[str], str, str]] = {
    "cls": (["cls"], "swin", "default"),
    "cls+seg": (["cls", "seg"], "mtl", "default"),
    "cls+rec": (["cls", "rec"], "mtl", "default"),
    "cls+seg+rec": (["cls", "seg", "rec"], "mtl", "default"),
    "cls-tiny": (["cls"], "swin", "tiny"),
    "cls+seg+rec-tiny": (["cls", "seg", "rec"], "mtl", "tiny"),
}

# Task sets compared at the base model size
BASE_TREND_MODELS = ("cls", "cls+seg", "cls+rec", "cls+seg+rec")

# (better, reference): shifted-test AUC of ``better`` should not fall below ``reference``
TREND_ORDERINGS = [("cls+seg", "cls"), ("cls+seg+rec", "cls+rec")]


def trend_model_config(base: ModelConfig, tasks: List[str], variant: str = "default") -> ModelConfig:
    """
    ``base`` with another task set. Switching variant drops the explicit
    depths/channels/heads so the variant preset applies.
    """
    if variant == base.variant:
        return ModelConfig(**base.model_dump(exclude={"weights", "tasks"}), tasks=tasks)
    values = base.model_dump(exclude={"weights", "tasks", "depths", "channels", "heads", "variant"})
    return ModelConfig(**values, variant=variant, tasks=tasks)


def joint_name(variant: str) -> str:
    return "joint" if variant == "default" else f"joint-{variant}"


def run_shift_trend(
    base_cfg: ModelConfig,
    samples: Sequence[Sample],
    splits: SplitSpec,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    out_dir: Optional[Union[str, Path]] = None,
    models: Sequence[str] = tuple(TREND_MODELS),
    include_joint: bool = False,
    scale: str = "desk",
    train_overrides: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Train every model in ``models`` once per seed and collect test_in /
    test_shift metrics. Returns per-run rows, per-model means and the
    ordering checks on mean shifted-test AUC.
    """
    overrides = dict(train_overrides or {})
    out_dir = Path(out_dir) if out_dir is not None else None
    rows = []

    def record(name: str, seed: int, model) -> None:
        for split, report in evaluate_splits(model, samples, splits).items():
            rows.append({"model": name, "seed": seed, "split": split, **report.as_dict()})

    # one joint model per encoder size among the requested rows
    joint_variants = sorted({TREND_MODELS[name][2] for name in models}) if include_joint else []

    for seed in seeds:
        for name in models:
            tasks, family, variant = TREND_MODELS[name]
            cfg = trend_model_config(base_cfg, tasks, variant)
            tcfg = TrainConfig.for_family(training_family(family, cfg.variant), scale, seed=seed, **overrides)
            run_dir = out_dir / name / f"seed{seed}" if out_dir is not None else None
            logger.info(f"Shift trend: {name} seed {seed}")
            result = train_mtl(cfg, tcfg, samples, splits, run_dir)
            record(name, seed, result["model"])

        if out_dir is None:
            continue
        for variant in joint_variants:
            name = joint_name(variant)
            seg_tcfg = TrainConfig.for_family("swin_unet", scale, seed=seed, **overrides)
            joint_tcfg = TrainConfig.for_family("joint", scale, seed=seed, **overrides)
            cfg = trend_model_config(base_cfg, ["cls"], variant)
            logger.info(f"Shift trend: {name} seed {seed}")
            result = train_joint_pipeline(cfg, seg_tcfg, joint_tcfg, samples, splits, out_dir / name / f"seed{seed}")
            record(name, seed, result["model"])

    runs = pd.DataFrame(rows)
    runs[["acc", "prec", "rec", "f1", "auc"]] = runs[["acc", "prec", "rec", "f1", "auc"]].astype(float)
    summary = (
        runs.groupby(["model", "split"])[["acc", "prec", "rec", "f1", "auc"]]
        .mean()
        .reset_index()
    )
    shift_auc = summary[summary["split"] == "test_shift"].set_index("model")["auc"]
    orderings = {
        f"{better} >= {reference}": bool(shift_auc[better] >= shift_auc[reference])
        for better, reference in TREND_ORDERINGS
        if better in shift_auc.index and reference in shift_auc.index
    }
    for check, held in orderings.items():
        (logger.success if held else logger.warning)(f"Shifted-test AUC ordering {check}: {'holds' if held else 'violated'}")

    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        runs.to_csv(out_dir / "trend_runs.csv", index=False)
        summary.to_csv(out_dir / "trend_summary.csv", index=False)

    return {"runs": runs, "summary": summary, "orderings": orderings}
