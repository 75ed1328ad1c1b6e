import os
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Optional, List, Dict, Iterable, Tuple, Union

import numpy as np
import torch
from scipy import ndimage

from .errors import ContractViolation, DatasetError

log = logging.getLogger("icpolypseg.metrics")

ArrayLike = Union[np.ndarray, torch.Tensor]

# 8-connectivity for connected components
STRUCTURE_8 = np.ones((3, 3), dtype=np.int32)

REPORT_COLUMNS = ("dataset", "model", "mDice", "mIoU", "MAE", "FNR")


def _plane(x: ArrayLike, what: str) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    arr = np.asarray(x, dtype=np.float64)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ContractViolation(f"{what} must be a single (S, S) map, got shape {arr.shape}")
    return arr


def _binary_plane(gt: ArrayLike) -> np.ndarray:
    g = _plane(gt, "gt")
    if not np.all((g == 0) | (g == 1)):
        raise ContractViolation("gt must be binary (0/1)")
    return g.astype(bool)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def binarize(pred_prob: ArrayLike, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ContractViolation(f"threshold must be in (0, 1), got {threshold}")
    return _plane(pred_prob, "pred") > threshold


def confusion(pred_prob: ArrayLike, gt: ArrayLike, threshold: float = 0.5) -> ConfusionCounts:
    p = binarize(pred_prob, threshold)
    g = _binary_plane(gt)
    if p.shape != g.shape:
        raise ContractViolation(f"pred {p.shape} and gt {g.shape} differ in size")
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size) - tp - fp - fn
    return ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn)


def dice(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return 2 * c.tp / (2 * c.tp + c.fp + c.fn)


def iou(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 1.0 if c.fp == 0 else 0.0
    return c.tp / (c.tp + c.fp + c.fn)


def fnr(c: ConfusionCounts) -> float:
    if c.tp + c.fn == 0:
        return 0.0
    return c.fn / (c.tp + c.fn)


def mae(pred_prob: ArrayLike, gt: ArrayLike) -> float:
    p = _plane(pred_prob, "pred")
    g = _binary_plane(gt)
    if p.shape != g.shape:
        raise ContractViolation(f"pred {p.shape} and gt {g.shape} differ in size")
    return float(np.mean(np.abs(p - g)))


# ---------------------------
# Integrity
# ---------------------------

@dataclass
class IntegrityRow:
    image_id: str
    gt_components: int
    macro_misses: int
    micro_deficit: float
    fnr: float


@dataclass
class IntegrityReport:
    rows: List[IntegrityRow] = field(default_factory=list)

    def summary(self) -> Dict[str, float]:
        n = len(self.rows)
        comps = sum(r.gt_components for r in self.rows)
        misses = sum(r.macro_misses for r in self.rows)
        return {
            "images": n,
            "gt_components": comps,
            "macro_misses": misses,
            "macro_miss_rate": misses / comps if comps else 0.0,
            "micro_deficit": float(np.mean([r.micro_deficit for r in self.rows])) if n else 0.0,
            "fnr": float(np.mean([r.fnr for r in self.rows])) if n else 0.0,
        }

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["image_id", "gt_components", "macro_misses", "micro_deficit", "fnr"])
            for r in self.rows:
                w.writerow([r.image_id, r.gt_components, r.macro_misses, f"{r.micro_deficit:.4f}", f"{r.fnr:.4f}"])


def integrity_image(pred_mask: ArrayLike, gt_mask: ArrayLike) -> Tuple[int, int, float]:
    """-> (gt components, components with no predicted pixel, mean uncovered fraction of the hit ones)."""
    p = _plane(pred_mask, "pred") > 0.5
    g = _binary_plane(gt_mask)
    labels, n = ndimage.label(g, structure=STRUCTURE_8)
    if n == 0:
        return 0, 0, 0.0
    index = np.arange(1, n + 1)
    areas = ndimage.sum_labels(np.ones_like(labels), labels, index)
    hits = ndimage.sum_labels(p.astype(np.int64), labels, index)
    misses = int(np.count_nonzero(hits == 0))
    matched = hits > 0
    deficit = float(np.mean(1.0 - hits[matched] / areas[matched])) if matched.any() else 0.0
    return n, misses, deficit


def integrity_report(preds: Iterable[ArrayLike], gts: Iterable[ArrayLike], threshold: float = 0.5,
                     ids: Optional[List[str]] = None) -> IntegrityReport:
    report = IntegrityReport()
    for i, (pred, gt) in enumerate(zip(preds, gts)):
        p = binarize(pred, threshold).astype(np.float64)
        comps, misses, deficit = integrity_image(p, gt)
        c = confusion(p, gt, threshold)
        image_id = ids[i] if ids else str(i)
        report.rows.append(IntegrityRow(image_id, comps, misses, deficit, fnr(c)))
    return report


# ---------------------------
# Reports
# ---------------------------

@dataclass
class ImageScore:
    image_id: str
    dice: float
    iou: float
    mae: float
    fnr: float


@dataclass
class EvalRow:
    dataset: str
    model: str
    mdice: float
    miou: float
    mae: float
    fnr: float


@dataclass
class EvalReport:
    rows: List[EvalRow] = field(default_factory=list)
    profile: Optional[Dict[str, float]] = None
    threshold: float = 0.5
    per_image: Dict[str, List[ImageScore]] = field(default_factory=dict)
    integrity: Dict[str, IntegrityReport] = field(default_factory=dict)

    def merge(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        self.per_image.update(other.per_image)
        self.integrity.update(other.integrity)
        return self

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "rows": [
                {"dataset": r.dataset, "model": r.model, "mDice": round(r.mdice, 4), "mIoU": round(r.miou, 4),
                 "MAE": round(r.mae, 4), "FNR": round(r.fnr, 4)}
                for r in self.rows
            ],
            "profile": self.profile,
            "integrity": {name: rep.summary() for name, rep in self.integrity.items()},
        }

    def to_json(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)

    def table(self) -> List[List[str]]:
        lines = [list(REPORT_COLUMNS)]
        for r in self.rows:
            lines.append([r.dataset, r.model] + [f"{v:.4f}" for v in (r.mdice, r.miou, r.mae, r.fnr)])
        return lines

    def to_csv(self, path: str) -> None:
        """Aligned columns, comma separated."""
        lines = self.table()
        widths = [max(len(line[i]) for line in lines) for i in range(len(REPORT_COLUMNS))]
        with open(path, "w", encoding="utf-8") as f:
            for line in lines:
                f.write(", ".join(cell.ljust(widths[i]) for i, cell in enumerate(line)).rstrip() + "\n")

    def write(self, out_dir: str, stem: str = "report") -> List[str]:
        os.makedirs(out_dir, exist_ok=True)
        paths = [os.path.join(out_dir, f"{stem}.json"), os.path.join(out_dir, f"{stem}.csv")]
        self.to_json(paths[0])
        self.to_csv(paths[1])
        for name, rep in self.integrity.items():
            p = os.path.join(out_dir, f"{stem}_integrity_{_slug(name)}.csv")
            rep.to_csv(p)
            paths.append(p)
        return paths


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name) or "dataset"


def score_image(image_id: str, pred_prob: ArrayLike, gt: ArrayLike, threshold: float) -> ImageScore:
    c = confusion(pred_prob, gt, threshold)
    return ImageScore(image_id, dice(c), iou(c), mae(pred_prob, gt), fnr(c))


def summarize(scores: List[ImageScore], dataset: str, model: str) -> EvalRow:
    if not scores:
        raise DatasetError(f"{dataset}: nothing to evaluate")
    n = len(scores)
    return EvalRow(
        dataset=dataset,
        model=model,
        mdice=sum(s.dice for s in scores) / n,
        miou=sum(s.iou for s in scores) / n,
        mae=sum(s.mae for s in scores) / n,
        fnr=sum(s.fnr for s in scores) / n,
    )


def evaluate_maps(items: Iterable[Tuple[str, ArrayLike, ArrayLike]], threshold: float = 0.5,
                  dataset_name: str = "dataset", model_name: str = "model") -> EvalReport:
    """Score (image_id, probability map, gt mask) triples in the given order."""
    scores: List[ImageScore] = []
    preds, gts, ids = [], [], []
    for image_id, prob, gt in items:
        p = _plane(prob, "pred")
        g = _plane(gt, "gt")
        if p.shape != g.shape:
            raise DatasetError(f"{image_id}: prediction {p.shape} and mask {g.shape} differ in size")
        scores.append(score_image(image_id, p, g, threshold))
        preds.append(p)
        gts.append(g)
        ids.append(image_id)
    row = summarize(scores, dataset_name, model_name)
    return EvalReport(
        rows=[row],
        threshold=threshold,
        per_image={dataset_name: scores},
        integrity={dataset_name: integrity_report(preds, gts, threshold, ids)},
    )


def evaluate(model: torch.nn.Module, dataset, threshold: float = 0.5, dataset_name: Optional[str] = None,
             model_name: str = "IC-PolypSeg", batch_size: int = 1) -> EvalReport:
    """Per-image metrics on the final map (p1, else p2), averaged per dataset."""
    if len(dataset) == 0:
        raise DatasetError("size-0 dataset")
    name = dataset_name or getattr(dataset, "name", "") or "dataset"
    param = next(model.parameters())
    was_training = model.training
    model.eval()

    def _items():
        with torch.no_grad():
            for batch in dataset.batches(batch_size):
                if batch.masks is None:
                    raise DatasetError(f"{name}: evaluation needs masks")
                final = model(batch.images.to(param.dtype)).final
                for i, image_id in enumerate(batch.ids):
                    if final[i].shape != batch.masks[i].shape:
                        img, msk = batch.sources[i]
                        raise DatasetError(f"image/mask mismatch: {img} vs {msk}")
                    yield image_id, final[i], batch.masks[i]

    try:
        report = evaluate_maps(_items(), threshold, name, model_name)
    finally:
        model.train(was_training)
    row = report.rows[0]
    log.info("%s: mDice %.4f mIoU %.4f MAE %.4f FNR %.4f", name, row.mdice, row.miou, row.mae, row.fnr)
    return report
