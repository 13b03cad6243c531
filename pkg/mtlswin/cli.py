"""
Command-line entry point.

    python -m mtlswin gen-data --out data/ --seed 0
    python -m mtlswin train --config configs/mtl_desk.cfg --set data=data/ --out runs/mtl
    python -m mtlswin eval --set checkpoint=runs/mtl/best.ckpt --set data=data/ --out runs/mtl/eval
    python -m mtlswin gradcam --set checkpoint=runs/mtl/best.ckpt --set data=data/ --out runs/mtl/cam
    python -m mtlswin gradcheck --out runs/gradcheck
    python -m mtlswin shift-trend --config configs/trend_desk.cfg --set data=data/ --out runs/trend

Every run writes ``run.meta`` (resolved config) and ``run.log`` to its output
directory and prints a JSON result. The exit status is 0 on success and the
error category's code otherwise.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import pandas as pd
from loguru import logger

from mtlswin.analysis.gradcam import argmax_in_box, grad_cam, save_heatmap_pgm, save_overlay_png
from mtlswin.analysis.metrics import evaluate_splits, format_table, metrics_table
from mtlswin.arch import check_config_matches, load_model
from mtlswin.config import (
    GeneratorConfig, ModelConfig, RunConfig, TrainConfig, build, load_config_file, model_config_from_values,
    select, settings, training_family,
)
from mtlswin.data import SPLITS, generate_dataset, load_dataset, load_splits, save_dataset
from mtlswin.errors import ConfigError, DatasetError, MtlSwinError, NumericsError
from mtlswin.experiments import TREND_MODELS, run_shift_trend
from mtlswin.numerics import run_gradcheck_suite
from mtlswin.train import train_joint, train_joint_pipeline, train_mtl

COMMANDS = ("gen-data", "train", "eval", "gradcam", "gradcheck", "shift-trend")

# Default task set and variant per model family
FAMILY_MODEL_DEFAULTS = {
    "mtl": {"tasks": ["cls", "seg", "rec"]},
    "mtl_tiny": {"tasks": ["cls", "seg", "rec"], "variant": "tiny"},
    "swin": {"tasks": ["cls"]},
    "swin_unet": {"tasks": ["seg"]},
    "joint": {"tasks": ["cls"]},
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    common.add_argument("--out", default=settings.DEFAULT_OUTPUT_DIR, help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config value (repeatable)")

    parser = argparse.ArgumentParser(prog="mtlswin", description="MTL-Swin-Unet desk-scale runs")
    sub = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        sub.add_parser(command, parents=[common])
    return parser


def setup_logging(out_dir: Path) -> int:
    """stderr sink plus a per-run file sink; returns the file sink id"""
    logger.remove()
    logger.add(sys.stderr, level=settings.LOG_LEVEL)
    return logger.add(
        out_dir / settings.LOG_FILE_NAME,
        level=settings.LOG_LEVEL,
        format="{level: <8} | {name}:{function} - {message}",
        mode="w",
    )


def write_run_meta(run: RunConfig, resolved: Mapping[str, Any]) -> Path:
    """Echo the resolved invocation as key=value lines"""
    out_dir = Path(run.output_dir)
    lines = [f"command={run.command}", f"seed={run.seed}", f"config_path={run.config_path or ''}", f"output_dir={out_dir}"]
    lines += [f"{key}={value}" for key, value in sorted(run.values.items())]
    for section, config in resolved.items():
        for key, value in sorted(config.items()):
            lines.append(f"{section}.{key}={json.dumps(value, sort_keys=True)}")
    path = out_dir / "run.meta"
    path.write_text("\n".join(lines) + "\n")
    return path


def _require(values: Mapping[str, str], key: str) -> str:
    if not values.get(key):
        raise ConfigError(f"Missing required setting '{key}' (use --set {key}=...)")
    return values[key]


def _flag(value: Optional[str]) -> bool:
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _int_list(value: str) -> List[int]:
    try:
        return [int(v) for v in value.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"Expected a comma-separated integer list, got {value!r}") from e


def _dataset(values: Mapping[str, str]):
    root = _require(values, "data")
    if not Path(root).is_dir():
        raise DatasetError(f"Dataset directory not found: {root}")
    samples = load_dataset(root)
    return samples, load_splits(root, samples)


def _family_model_config(values: Mapping[str, str], family: str) -> ModelConfig:
    merged = {k: v for k, v in FAMILY_MODEL_DEFAULTS[family].items() if k not in values}
    merged.update(values)
    return model_config_from_values(merged)


def cmd_gen_data(run: RunConfig, resolved: Dict[str, Any]) -> Dict[str, Any]:
    gen_cfg = build(GeneratorConfig, {**select(run.values, GeneratorConfig), "seed": run.seed})
    resolved["generator"] = gen_cfg.model_dump(mode="json")
    samples, splits = generate_dataset(gen_cfg)
    save_dataset(samples, run.output_dir, splits)
    counts = {name: len(idx) for name, idx in splits.by_split().items()}
    return {"message": f"Dataset written to {run.output_dir}", "samples": len(samples), "splits": counts}


def cmd_train(run: RunConfig, resolved: Dict[str, Any]) -> Dict[str, Any]:
    values = run.values
    family = values.get("family", "mtl")
    if family not in FAMILY_MODEL_DEFAULTS:
        raise ConfigError(f"Unknown model family: {family}")
    scale = values.get("scale", "desk")
    train_values = {**select(values, TrainConfig, "train."), "seed": run.seed}
    cfg = _family_model_config(values, family)
    tcfg = TrainConfig.for_family(training_family(family, cfg.variant), scale, **train_values)
    resolved["model"] = cfg.model_dump(mode="json")
    resolved["train"] = tcfg.model_dump(mode="json")

    samples, splits = _dataset(values)
    out_dir = Path(run.output_dir)
    if family == "joint":
        if values.get("seg_checkpoint"):
            result = train_joint(values["seg_checkpoint"], tcfg, samples, splits, out_dir, cfg)
        else:
            seg_tcfg = TrainConfig.for_family("swin_unet", scale, **train_values)
            result = train_joint_pipeline(cfg, seg_tcfg, tcfg, samples, splits, out_dir)
    else:
        result = train_mtl(cfg, tcfg, samples, splits, out_dir)

    summary = {k: v for k, v in result.items() if k not in ("model", "history")}
    summary["message"] = f"Trained {family} for {result['iterations']} iterations"
    return summary


def cmd_eval(run: RunConfig, resolved: Dict[str, Any]) -> Dict[str, Any]:
    values = run.values
    model, meta = load_model(_require(values, "checkpoint"))
    check_config_matches(model.cfg, values)
    resolved["model"] = meta.get("model_config", {})
    samples, splits = _dataset(values)
    names = [s.strip() for s in values.get("splits", "test_in,test_shift").split(",") if s.strip()]
    unknown = set(names) - set(SPLITS)
    if unknown:
        raise ConfigError(f"Unknown splits: {sorted(unknown)}")

    reports = evaluate_splits(model, samples, splits, names)
    out_dir = Path(run.output_dir)
    metrics_table(reports).to_csv(out_dir / "metrics.csv", index=False)
    table = format_table(reports)
    (out_dir / "metrics.txt").write_text(table + "\n")
    logger.info("\n" + table)
    return {"message": f"Evaluated {', '.join(names)}", "metrics": {n: r.as_dict() for n, r in reports.items()}}


def cmd_gradcam(run: RunConfig, resolved: Dict[str, Any]) -> Dict[str, Any]:
    values = run.values
    model, meta = load_model(_require(values, "checkpoint"))
    check_config_matches(model.cfg, values)
    resolved["model"] = meta.get("model_config", {})
    samples, splits = _dataset(values)
    split = values.get("split", "test_in")
    if split not in SPLITS:
        raise ConfigError(f"Unknown split: {split}")
    count = int(values.get("count", 8))
    stage = int(values.get("stage", -1))
    target_class = int(values.get("target_class", 1))

    chosen = [s for s in splits.select(samples, split) if s.label == target_class][:count]
    out_dir = Path(run.output_dir)
    rows = []
    for sample in chosen:
        heatmap = grad_cam(model, sample.image, target_class, stage)
        stem = Path(sample.file).stem
        save_heatmap_pgm(heatmap, out_dir / "heatmaps" / f"{stem}.pgm")
        save_overlay_png(sample.image, heatmap, out_dir / "overlays" / f"{stem}.png")
        inside = argmax_in_box(heatmap, sample.lesion_box) if sample.lesion_box is not None else None
        rows.append({"file": sample.file, "label": sample.label, "peak_in_lesion": inside})

    pd.DataFrame(rows, columns=["file", "label", "peak_in_lesion"]).to_csv(out_dir / "gradcam.csv", index=False)
    checked = [r["peak_in_lesion"] for r in rows if r["peak_in_lesion"] is not None]
    rate = sum(checked) / len(checked) if checked else None
    return {"message": f"Wrote {len(rows)} heatmaps", "heatmaps": len(rows), "localisation_rate": rate}


def cmd_gradcheck(run: RunConfig, resolved: Dict[str, Any]) -> Dict[str, Any]:
    eps = float(run.values.get("eps", 1e-6))
    tol = float(run.values.get("tol", 1e-5))
    report = run_gradcheck_suite(run.seed, eps, tol)
    pd.DataFrame(report).to_csv(Path(run.output_dir) / "gradcheck.csv", index=False)
    failed = [f"{r['primitive']}[{r['shape']}]" for r in report if not r["passed"]]
    if failed:
        raise NumericsError(f"Gradcheck failed for {', '.join(failed)}")
    worst = max(r["error"] for r in report)
    return {"message": f"All {len(report)} primitive checks passed", "max_error": worst}


def cmd_shift_trend(run: RunConfig, resolved: Dict[str, Any]) -> Dict[str, Any]:
    values = run.values
    cfg = _family_model_config(values, "mtl")
    resolved["model"] = cfg.model_dump(mode="json")
    seeds = _int_list(values.get("seeds", "0,1,2,3,4"))
    models = [m.strip() for m in values.get("models", ",".join(TREND_MODELS)).split(",") if m.strip()]
    unknown = set(models) - set(TREND_MODELS)
    if unknown:
        raise ConfigError(f"Unknown trend models: {sorted(unknown)}")
    overrides = select(values, TrainConfig, "train.")
    overrides.pop("seed", None)

    samples, splits = _dataset(values)
    result = run_shift_trend(
        cfg, samples, splits, seeds, run.output_dir, models,
        include_joint=_flag(values.get("joint")), scale=values.get("scale", "desk"), train_overrides=overrides,
    )
    logger.info("\n" + result["summary"].to_string(index=False))
    return {"message": f"Trend over seeds {seeds}", "orderings": result["orderings"]}


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "gradcheck": cmd_gradcheck,
    "shift-trend": cmd_shift_trend,
}


def run_command(argv: Optional[Sequence[str]] = None) -> Dict[str, Any]:
    """Parse, execute and return the JSON-ready result, including ``exit_code``"""
    args = build_parser().parse_args(argv)
    try:
        values = load_config_file(args.config, args.overrides)
        run = RunConfig(command=args.command, config_path=args.config, seed=args.seed,
                        output_dir=args.out, values=values)
        out_dir = Path(run.output_dir)
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DatasetError(f"Cannot create output directory {out_dir}: {e}") from e
        sink = setup_logging(out_dir)
        resolved: Dict[str, Any] = {}
        try:
            logger.info(f"Running {run.command} (seed {run.seed}) into {out_dir}")
            result = HANDLERS[run.command](run, resolved)
        finally:
            write_run_meta(run, resolved)
            logger.remove(sink)
        return {"success": True, "exit_code": 0, **result}
    except MtlSwinError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return {"success": False, "message": f"{args.command} failed: {e}", "error": type(e).__name__,
                "exit_code": e.exit_code}
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}")
        return {"success": False, "message": f"Critical error in {args.command}: {e}", "error": str(e),
                "exit_code": 1}


def main(argv: Optional[Sequence[str]] = None) -> int:
    result = run_command(argv)
    print(json.dumps(result, default=str))
    return result["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
