"""Metrics, evaluation reports, and the pathway-sharing benchmark.

Classification accuracy is correct count over test count. A localization
counts as correct when the predicted box's IoU with the annotated object box
strictly exceeds 0.5. PCL is the fraction of part points falling inside the
predicted box (half-open convention). The benchmark compares one shared
backbone pass feeding all heads against one full network pass per head.
"""

from __future__ import annotations

import json
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import attention as att
from . import autodiff as ad
from . import pipeline as pl
from . import rpn
from . import synthdata as sd

LOCALIZATION_LEVEL = "cam"  # boxes scored against the object annotation
THREADS_ENV = "WSDL_THREADS"


def accuracy(predictions, labels) -> float:
    predictions = list(predictions)
    labels = list(labels)
    if not predictions:
        raise ValueError("accuracy needs at least one prediction")
    if len(predictions) != len(labels):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(labels)} labels")
    correct = sum(1 for p, t in zip(predictions, labels) if p == t)
    return correct / len(predictions)


def localization_accuracy(pred_boxes, gt_boxes, thresh: float = 0.5) -> float:
    pred_boxes = list(pred_boxes)
    gt_boxes = list(gt_boxes)
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"length mismatch: {len(pred_boxes)} vs {len(gt_boxes)} boxes")
    hits = sum(1 for p, g in zip(pred_boxes, gt_boxes) if rpn.iou(p, g) > thresh)
    return hits / len(pred_boxes)


def pcl(pred_boxes, part_points):
    """Per-part and average fraction of part points inside the predicted boxes."""
    pred_boxes = list(pred_boxes)
    part_points = list(part_points)
    if len(pred_boxes) != len(part_points):
        raise ValueError(f"length mismatch: {len(pred_boxes)} boxes vs {len(part_points)} point sets")
    k = len(part_points[0])
    hits = [0] * k
    for box, parts in zip(pred_boxes, part_points):
        if len(parts) != k:
            raise ValueError("inconsistent part count across images")
        for idx, (x, y) in enumerate(parts):
            if box.contains(x, y):
                hits[idx] += 1
    per_part = [h / len(pred_boxes) for h in hits]
    return per_part, sum(per_part) / k


def confusion_matrix(predictions, labels, num_classes: int) -> np.ndarray:
    """Counts[i, j] of true class i predicted as j."""
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    for p, t in zip(predictions, labels, strict=True):
        if not (0 <= p < num_classes and 0 <= t < num_classes):
            raise ValueError(f"class out of range [0,{num_classes}): true={t}, predicted={p}")
        m[t, p] += 1
    return m


def top_confused(matrix: np.ndarray, k: int = 5) -> list:
    """Largest off-diagonal entries as (true, predicted, count), ties lexicographic."""
    pairs = []
    c = matrix.shape[0]
    for i in range(c):
        for j in range(c):
            if i != j and matrix[i, j] > 0:
                pairs.append((int(matrix[i, j]), i, j))
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    return [(i, j, n) for n, i, j in pairs[:k]]


# ---------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    test_count: int
    correct_count: int
    accuracy: float
    per_level_accuracy: dict
    full_image_accuracy: float
    dln_localization: dict            # level -> accuracy at IoU > 0.5
    maen_localization: dict
    localization_accuracy: float      # dln, cam level
    maen_localization_accuracy: float
    pcl_per_part: list
    pcl_average: float
    confusion: list                   # row-major counts
    top_confused_pairs: list
    levels: list
    timing: dict | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        raw["per_level_accuracy"] = dict(raw["per_level_accuracy"])
        raw["top_confused_pairs"] = [tuple(t) for t in raw["top_confused_pairs"]]
        return cls(**raw)


def evaluate_model(model: pl.TrainedModel, test_dir) -> EvalReport:
    """Run inference over a test split and score it against the annotations."""
    view = sd.TrainView(test_dir)
    annotations = sd.load_annotations(test_dir)
    levels = list(model.levels)
    num_classes = model.config.backbone.num_classes

    workers = int(os.environ.get(THREADS_ENV, "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            predictions = list(pool.map(lambda img: pl.infer(img, model), view.images))
    else:
        predictions = [pl.infer(img, model) for img in view.images]
    maen_all = [dict(att.pseudo_boxes(img, model.maen_params, model.config.backbone))
                for img in view.images]
    maen_boxes = {level: [boxes[level] for boxes in maen_all] for level in levels}

    labels = view.labels.tolist()
    fused = [p.predicted_class for p in predictions]
    gt_boxes = [annotations[name].object_box for name in view.filenames]
    parts = [annotations[name].part_points for name in view.filenames]

    per_level_acc = {
        level: accuracy([int(np.argmax(p.per_level[level].scores)) for p in predictions], labels)
        for level in levels
    }
    dln_loc = {
        level: localization_accuracy([p.per_level[level].box for p in predictions], gt_boxes)
        for level in levels
    }
    maen_loc = {level: localization_accuracy(maen_boxes[level], gt_boxes) for level in levels}

    loc_level = LOCALIZATION_LEVEL if LOCALIZATION_LEVEL in dln_loc else levels[-1]
    loc_boxes = [p.per_level[loc_level].box for p in predictions]
    per_part, pcl_avg = pcl(loc_boxes, parts)
    matrix = confusion_matrix(fused, labels, num_classes)

    return EvalReport(
        test_count=len(view),
        correct_count=int(sum(1 for p, t in zip(fused, labels) if p == t)),
        accuracy=accuracy(fused, labels),
        per_level_accuracy=per_level_acc,
        full_image_accuracy=accuracy(
            [int(np.argmax(p.full_image_scores)) for p in predictions], labels),
        dln_localization=dln_loc,
        maen_localization=maen_loc,
        localization_accuracy=dln_loc[loc_level],
        maen_localization_accuracy=maen_loc[loc_level],
        pcl_per_part=per_part,
        pcl_average=pcl_avg,
        confusion=matrix.tolist(),
        top_confused_pairs=top_confused(matrix),
        levels=levels,
    )


def write_report(report: EvalReport, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    c = len(report.confusion)
    with open(os.path.join(out_dir, "confusion_matrix.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write("true\\predicted," + ",".join(str(j) for j in range(c)) + "\n")
        for i, row in enumerate(report.confusion):
            fh.write(f"{i}," + ",".join(str(v) for v in row) + "\n")
    with open(os.path.join(out_dir, "pcl.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("part,fraction\n")
        for idx, frac in enumerate(report.pcl_per_part):
            fh.write(f"{idx},{repr(frac)}\n")
        fh.write(f"average,{repr(report.pcl_average)}\n")


# ---------------------------------------------------------------------------
# benchmark


def bench(model: pl.TrainedModel, images, mode: str, repeats: int = 5,
          min_images: int = 100) -> float:
    """Median images/second over ``repeats`` timed passes (one warm-up pass excluded).

    ``shared`` runs the n-pathway once per image; ``separate`` runs one full
    network per level per image.
    """
    if len(images) < min_images:
        raise ValueError(f"bench needs at least {min_images} images, got {len(images)}")
    if mode == "shared":
        run = pl.infer
    elif mode == "separate":
        run = pl.infer_separate
    else:
        raise ValueError(f"unknown bench mode {mode!r}")
    ad.enable_buffer_reuse()

    for img in images:  # warm-up, excluded from timing
        run(img, model)
    rates = []
    for _ in range(repeats):
        start = time.perf_counter()
        for img in images:
            run(img, model)
        rates.append(len(images) / (time.perf_counter() - start))
    return statistics.median(rates)
