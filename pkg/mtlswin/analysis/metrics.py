"""
Classification and segmentation metrics: acc / prec / rec / F1 / AUC at a
0.5 threshold on the positive-class probability, and mask IoU.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from loguru import logger
from sklearn.metrics import confusion_matrix, roc_auc_score

from mtlswin.data import Sample, SplitSpec, make_loader
from mtlswin.errors import NumericsError, ShapeError
from mtlswin.numerics import ensure_finite

DECISION_THRESHOLD = 0.5


@dataclass
class MetricsReport:
    acc: float
    prec: float
    rec: float
    f1: float
    auc: Optional[float]
    tp: int
    fp: int
    tn: int
    fn: int
    iou_seg: Optional[float] = None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def as_dict(self) -> Dict[str, Optional[float]]:
        return asdict(self)


def _ratio(num: float, den: float) -> float:
    return num / den if den > 0 else 0.0


def classification_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float = DECISION_THRESHOLD) -> MetricsReport:
    """
    Hard metrics at ``score >= threshold``; AUC from the ranking (ties count one half).
    AUC is None when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(int).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores for {labels.size} labels")
    if not np.isfinite(scores).all() or scores.min(initial=0.0) < 0.0 or scores.max(initial=0.0) > 1.0:
        raise NumericsError("Scores must be finite probabilities in [0, 1]")
    if not np.isin(labels, (0, 1)).all():
        raise ShapeError("Labels must be 0 or 1")

    preds = (scores >= threshold).astype(int)
    tn, fp, fn, tp = (int(v) for v in confusion_matrix(labels, preds, labels=[0, 1]).ravel())
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    f1 = _ratio(2 * prec * rec, prec + rec)
    auc = float(roc_auc_score(labels, scores)) if len(np.unique(labels)) == 2 else None
    return MetricsReport(
        acc=_ratio(tp + tn, labels.size), prec=prec, rec=rec, f1=f1, auc=auc, tp=tp, fp=fp, tn=tn, fn=fn,
    )


def iou(pred_mask, true_mask) -> float:
    """|A & B| / |A | B|, with two empty masks scoring 1"""
    pred = np.asarray(pred_mask).astype(bool)
    true = np.asarray(true_mask).astype(bool)
    if pred.shape != true.shape:
        raise ShapeError(f"Mask shapes differ: {pred.shape} vs {true.shape}")
    union = np.logical_or(pred, true).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, true).sum() / union)


def mean_iou(pred_masks: Sequence[np.ndarray], true_masks: Sequence[np.ndarray]) -> Optional[float]:
    values = [iou(p, t) for p, t in zip(pred_masks, true_masks)]
    return float(np.mean(values)) if values else None


def _classify_and_segment(model: nn.Module, images: torch.Tensor):
    outputs = model(images)
    if isinstance(outputs, torch.Tensor):
        return outputs, None
    return outputs.cls_logits, outputs.seg_logits


@torch.no_grad()
def predict(model: nn.Module, samples: Sequence[Sample], batch: int = 64) -> Dict[str, object]:
    """Positive-class probabilities and binary segmentation predictions for ``samples``"""
    was_training = model.training
    model.eval()
    scores: List[float] = []
    seg_preds: List[np.ndarray] = []
    try:
        for batch_data in make_loader(samples, batch):
            cls_logits, seg_logits = _classify_and_segment(model, batch_data["image"])
            if cls_logits is not None:
                ensure_finite(cls_logits, "classification logits")
                scores.extend(torch.softmax(cls_logits, dim=-1)[:, 1].tolist())
            if seg_logits is not None:
                seg_preds.extend(seg_logits.argmax(dim=-1).to(torch.uint8).numpy())
    finally:
        model.train(was_training)
    return {"scores": np.array(scores) if scores else None, "seg_preds": seg_preds or None}


def evaluate_samples(model: nn.Module, samples: Sequence[Sample], batch: int = 64) -> MetricsReport:
    """Metric battery on one split; IoU over the annotated samples when the model segments"""
    predicted = predict(model, samples, batch)
    labels = [s.label for s in samples]
    if predicted["scores"] is not None:
        report = classification_metrics(predicted["scores"], labels)
    else:
        report = MetricsReport(acc=float("nan"), prec=float("nan"), rec=float("nan"), f1=float("nan"),
                               auc=None, tp=0, fp=0, tn=0, fn=0)
    if predicted["seg_preds"] is not None:
        pairs = [(p, s.mask) for p, s in zip(predicted["seg_preds"], samples) if s.mask is not None]
        report.iou_seg = mean_iou([p for p, _ in pairs], [t for _, t in pairs])
    return report


def evaluate_splits(
    model: nn.Module, samples: Sequence[Sample], splits: SplitSpec,
    names: Sequence[str] = ("test_in", "test_shift"), batch: int = 64,
) -> Dict[str, MetricsReport]:
    reports = {}
    for name in names:
        reports[name] = evaluate_samples(model, splits.select(samples, name), batch)
        auc = reports[name].auc
        logger.info(f"{name}: acc={reports[name].acc:.3f} auc={'n/a' if auc is None else f'{auc:.3f}'}")
    return reports


def metrics_table(reports: Mapping[str, MetricsReport]) -> pd.DataFrame:
    """One row per split, columns acc prec rec f1 auc iou_seg tp fp tn fn"""
    frame = pd.DataFrame([{"split": name, **report.as_dict()} for name, report in reports.items()])
    return frame[["split", "acc", "prec", "rec", "f1", "auc", "iou_seg", "tp", "fp", "tn", "fn"]]


def format_table(reports: Mapping[str, MetricsReport]) -> str:
    """Human-readable rendering of :func:`metrics_table`"""
    return metrics_table(reports).to_string(index=False, float_format=lambda v: f"{v:.3f}", na_rep="-")
