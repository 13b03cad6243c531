"""
Training loop: SGD with momentum and coupled L2, polynomial learning-rate
decay, masked multi-task loss, per-epoch validation and best-by-AUC
checkpointing. Also the two-phase joint learning procedure.
"""

from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from loguru import logger
from torch.optim import SGD
from torch.optim.lr_scheduler import LambdaLR

from mtlswin.analysis.metrics import MetricsReport, evaluate_samples
from mtlswin.arch import JointSwinTransformer, Model, MtlSwinUnet, encoder_from_checkpoint, load_model, save_model
from mtlswin.config import ModelConfig, TrainConfig, settings
from mtlswin.data import Sample, SplitSpec, make_loader
from mtlswin.errors import ConfigError, NonFiniteError, ShapeError, TrainingDivergedError
from mtlswin.losses import LossBatchInputs, TaskLosses, compute_losses
from mtlswin.numerics import forward_backward, seed_everything, state_hash

EPOCH_LOG_COLUMNS = ["epoch", "L_cls", "L_seg", "L_rec", "L_total", "val_acc", "val_auc", "lr"]


@dataclass(frozen=True)
class LrSchedule:
    lr_base: float
    iter_max: int
    exponent: float = 0.9


def lr_at(iteration: int, sched: LrSchedule) -> float:
    """lr_base * (1 - iteration / iter_max) ** exponent"""
    if iteration < 0 or iteration > sched.iter_max:
        raise ConfigError(f"iteration {iteration} outside [0, {sched.iter_max}]")
    return sched.lr_base * (1.0 - iteration / sched.iter_max) ** sched.exponent


def poly_scheduler(optimizer: SGD, sched: LrSchedule) -> LambdaLR:
    """LambdaLR driving ``optimizer`` along :func:`lr_at`"""
    return LambdaLR(optimizer, lambda it: lr_at(min(it, sched.iter_max), sched) / sched.lr_base)


def build_optimizer(model: nn.Module, tcfg: TrainConfig) -> SGD:
    """SGD over trainable parameters only; weight decay is added to the gradient"""
    params = [p for p in model.parameters() if p.requires_grad]
    return SGD(params, lr=tcfg.lr_base, momentum=tcfg.momentum, weight_decay=tcfg.weight_decay)


def sgd_step(
    params: Sequence[nn.Parameter],
    grads: Sequence[torch.Tensor],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 1e-4,
    optimizer: Optional[SGD] = None,
) -> SGD:
    """
    v <- momentum * v + (grad + weight_decay * value); value <- value - lr * v.

    Frozen parameters are skipped. Pass the returned optimizer back in to keep
    the velocity buffers between calls.
    """
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for param, grad in zip(params, grads):
        if param.shape != grad.shape:
            raise ShapeError(f"gradient {tuple(grad.shape)} does not match parameter {tuple(param.shape)}")

    pairs = [(p, g) for p, g in zip(params, grads) if p.requires_grad]
    if optimizer is None:
        optimizer = SGD([p for p, _ in pairs], lr=lr, momentum=momentum, weight_decay=weight_decay)
    for group in optimizer.param_groups:
        group["lr"] = lr
    for param, grad in pairs:
        param.grad = grad.detach().clone().to(param.dtype)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return optimizer


def loss_inputs(model: Model, batch: Dict[str, torch.Tensor]) -> LossBatchInputs:
    images = batch["image"]
    if isinstance(model, JointSwinTransformer):
        return LossBatchInputs(cls_logits=model(images), cls_labels=batch["label"])
    outputs = model(images)
    return LossBatchInputs(
        cls_logits=outputs.cls_logits, cls_labels=batch["label"],
        seg_logits=outputs.seg_logits, seg_masks=batch["mask"], mask_present=batch["mask_present"],
        rec_output=outputs.rec_image, rec_target=images,
    )


def loss_weights(model: Model):
    if isinstance(model, JointSwinTransformer):
        return model.cfg.weights.model_copy(update={"lambda_cls": 1.0, "lambda_seg": None, "lambda_rec": None})
    return model.cfg.weights


class Trainer:
    """Runs one model through its TrainConfig on train/val samples"""

    def __init__(
        self,
        model: Model,
        tcfg: TrainConfig,
        train_samples: Sequence[Sample],
        val_samples: Sequence[Sample] = (),
        out_dir: Optional[Union[str, Path]] = None,
    ):
        if not train_samples:
            raise ConfigError("No training samples")
        self.model = model
        self.tcfg = tcfg
        self.train_samples = list(train_samples)
        self.val_samples = list(val_samples)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.weights = loss_weights(model)

        self.loader = make_loader(self.train_samples, tcfg.batch, shuffle=True, augment=tcfg.augment, seed=tcfg.seed)
        iter_max = tcfg.epochs * len(self.loader)
        if tcfg.max_iterations is not None:
            iter_max = min(iter_max, tcfg.max_iterations)
        self.schedule = LrSchedule(tcfg.lr_base, iter_max, tcfg.lr_exponent)
        self.optimizer = build_optimizer(model, tcfg)
        self.scheduler = poly_scheduler(self.optimizer, self.schedule)
        self.iteration = 0
        self.history: List[Dict[str, float]] = []

        # Performance tracking
        self.training_metrics = {
            "loss_history": [],
            "val_auc_history": [],
            "current_epoch": 0,
            "total_epochs": tcfg.epochs,
            "best_val_score": float("-inf"),
            "best_epoch": None,
            "training_start_time": None,
            "last_update": None,
        }

    @property
    def current_lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def train_step(self, batch: Dict[str, torch.Tensor]) -> TaskLosses:
        self.optimizer.zero_grad(set_to_none=True)
        parts = compute_losses(loss_inputs(self.model, batch), self.weights)
        try:
            forward_backward(parts.total, self.model)
        except NonFiniteError as e:
            logger.error(f"Loss diverged at iteration {self.iteration}: {e}")
            raise TrainingDivergedError(self.iteration, f"Training diverged at iteration {self.iteration}: {e}") from e
        self.optimizer.step()
        self.scheduler.step()
        self.iteration += 1
        return parts

    def validate(self) -> Optional[MetricsReport]:
        if not self.val_samples:
            return None
        return evaluate_samples(self.model, self.val_samples, self.tcfg.batch)

    @staticmethod
    def selection_score(report: Optional[MetricsReport]) -> Optional[float]:
        """Validation AUC; IoU for segmentation-only models"""
        if report is None:
            return None
        if report.auc is not None:
            return report.auc
        return report.iou_seg

    def train_epoch(self, epoch: int) -> Dict[str, float]:
        self.model.train()
        self.loader.dataset.set_epoch(epoch)
        sums: Dict[str, List[float]] = {}
        lr = self.current_lr
        for batch in self.loader:
            if self.iteration >= self.schedule.iter_max:
                break
            for key, value in self.train_step(batch).as_floats().items():
                sums.setdefault(key, []).append(value)
        return {"lr": lr, **{key: float(np.mean(values)) for key, values in sums.items()}}

    def fit(self) -> Dict[str, Any]:
        self.training_metrics["training_start_time"] = datetime.utcnow()
        logger.info(
            f"Training {self.tcfg.family}: {len(self.train_samples)} samples, "
            f"{self.schedule.iter_max} iterations, batch {self.tcfg.batch}, lr {self.tcfg.lr_base}"
        )
        best_path = self.out_dir / "best.ckpt" if self.out_dir is not None else None

        for epoch in range(self.tcfg.epochs):
            if self.iteration >= self.schedule.iter_max:
                break
            self.training_metrics["current_epoch"] = epoch
            losses = self.train_epoch(epoch)
            report = self.validate()
            row = {
                "epoch": epoch,
                "L_cls": losses.get("L_cls", float("nan")),
                "L_seg": losses.get("L_seg", float("nan")),
                "L_rec": losses.get("L_rec", float("nan")),
                "L_total": losses.get("L_total", float("nan")),
                "val_acc": report.acc if report is not None else float("nan"),
                "val_auc": report.auc if report is not None and report.auc is not None else float("nan"),
                "lr": losses["lr"],
            }
            self.history.append(row)

            self.training_metrics["loss_history"].append(row["L_total"])
            self.training_metrics["val_auc_history"].append(row["val_auc"])
            self.training_metrics["last_update"] = datetime.utcnow()

            score = self.selection_score(report)
            if score is not None and score > self.training_metrics["best_val_score"]:
                self.training_metrics["best_val_score"] = score
                self.training_metrics["best_epoch"] = epoch
                if best_path is not None:
                    save_model(self.model, best_path, epoch=epoch, val_score=score, seed=self.tcfg.seed)

            logger.info(
                f"Epoch {epoch}: L_total {row['L_total']:.6f}, L_cls {row['L_cls']:.6f}, "
                f"L_seg {row['L_seg']:.6f}, L_rec {row['L_rec']:.6f}, "
                f"val acc {row['val_acc']:.4f}, val auc {row['val_auc']:.4f}, lr {row['lr']:.6f}"
            )

        final_path = None
        if self.out_dir is not None:
            self.write_epoch_log(self.out_dir / "epochs.csv")
            final_path = save_model(self.model, self.out_dir / "final.ckpt", epoch=len(self.history) - 1, seed=self.tcfg.seed)
            if best_path is not None and not best_path.exists():
                save_model(self.model, best_path, epoch=len(self.history) - 1, seed=self.tcfg.seed)

        result = {
            "status": "completed",
            "family": self.tcfg.family,
            "iterations": self.iteration,
            "epochs_trained": len(self.history),
            "final_loss": self.history[-1]["L_total"] if self.history else None,
            "best_val_score": self.training_metrics["best_val_score"] if self.training_metrics["best_epoch"] is not None else None,
            "best_epoch": self.training_metrics["best_epoch"],
            "best_checkpoint": str(best_path) if best_path is not None else None,
            "final_checkpoint": str(final_path) if final_path is not None else None,
        }
        logger.success(f"Training {self.tcfg.family} completed after {self.iteration} iterations")
        return result

    def write_epoch_log(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(self.history, columns=EPOCH_LOG_COLUMNS).to_csv(path, index=False)
        return path

    def get_training_status(self) -> Dict[str, Any]:
        metrics = self.training_metrics
        done = len(self.history)
        return {
            "current_epoch": metrics["current_epoch"],
            "total_epochs": metrics["total_epochs"],
            "progress_percentage": done / metrics["total_epochs"] * 100,
            "iteration": self.iteration,
            "iter_max": self.schedule.iter_max,
            "current_loss": metrics["loss_history"][-1] if metrics["loss_history"] else None,
            "best_val_score": metrics["best_val_score"] if metrics["best_epoch"] is not None else None,
            "best_epoch": metrics["best_epoch"],
            "current_lr": self.current_lr,
            "last_update": metrics["last_update"].isoformat() if metrics["last_update"] else None,
        }


def _configure_threads() -> None:
    torch.set_num_threads(settings.THREADS)


def train_mtl(
    cfg: ModelConfig,
    tcfg: TrainConfig,
    samples: Sequence[Sample],
    splits: SplitSpec,
    out_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """Train an MTL-Swin-Unet (or its cls-only / seg-only reductions) on the train split"""
    _configure_threads()
    seed_everything(tcfg.seed)
    model = MtlSwinUnet(cfg)
    trainer = Trainer(model, tcfg, splits.select(samples, "train"), splits.select(samples, "val"), out_dir)
    result = trainer.fit()
    result["model"] = model
    result["history"] = trainer.history
    return result


def train_joint(
    seg_ckpt: Union[str, Path],
    tcfg: TrainConfig,
    samples: Sequence[Sample],
    splits: SplitSpec,
    out_dir: Optional[Union[str, Path]] = None,
    cfg: Optional[ModelConfig] = None,
) -> Dict[str, Any]:
    """
    Phase 2 of joint learning: freeze the encoder of a trained Swin-Unet and
    train a second encoder plus the concatenation head on classification.
    """
    _configure_threads()
    seg_model, _ = load_model(seg_ckpt)
    if not isinstance(seg_model, MtlSwinUnet) or seg_model.cfg.tasks != ["seg"]:
        raise ConfigError(f"{seg_ckpt} is not a segmentation-only Swin-Unet checkpoint")
    if cfg is None:
        cfg = ModelConfig(**seg_model.cfg.model_dump(exclude={"weights", "tasks"}), tasks=["cls"])

    seed_everything(tcfg.seed)
    frozen = encoder_from_checkpoint(seg_ckpt, cfg)
    model = JointSwinTransformer(cfg, frozen)
    frozen_before = state_hash(model.frozen_encoder)

    trainer = Trainer(model, tcfg, splits.select(samples, "train"), splits.select(samples, "val"), out_dir)
    result = trainer.fit()
    frozen_after = state_hash(model.frozen_encoder)
    if frozen_before != frozen_after:
        raise TrainingDivergedError(trainer.iteration, "Frozen encoder changed during joint training")
    result.update({"model": model, "history": trainer.history, "frozen_hash": frozen_after})
    return result


def train_joint_pipeline(
    cfg: ModelConfig,
    seg_tcfg: TrainConfig,
    joint_tcfg: TrainConfig,
    samples: Sequence[Sample],
    splits: SplitSpec,
    out_dir: Union[str, Path],
) -> Dict[str, Any]:
    """Both phases: Swin-Unet segmentation training, then joint classification"""
    out_dir = Path(out_dir)
    seg_cfg = ModelConfig(**cfg.model_dump(exclude={"weights", "tasks"}), tasks=["seg"])
    phase1 = train_mtl(seg_cfg, seg_tcfg, samples, splits, out_dir / "swin_unet")
    joint_cfg = ModelConfig(**cfg.model_dump(exclude={"weights", "tasks"}), tasks=["cls"])
    phase2 = train_joint(phase1["best_checkpoint"], joint_tcfg, samples, splits, out_dir / "joint", joint_cfg)
    phase2["phase1"] = {k: v for k, v in phase1.items() if k not in ("model", "history")}
    return phase2
