"""RoI pooling, per-level localization heads, and score fusion.

Every head reads the one shared stride-8 feature map: a proposal box is
max-pooled into a fixed 4x4 grid, flattened, and pushed through a small
two-branch MLP giving (C+1)-way class scores (background last) and a
class-agnostic box refinement. At inference each head contributes the
renormalized foreground scores of its most confident proposal, and the
final class is the arithmetic mean of the head vectors and a full-image
score vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import rpn
from .attention import Box, whole_image_box
from .autodiff import Tensor


@dataclass
class HeadConfig:
    roi_out: tuple = (4, 4)
    hidden: int = 128
    num_classes: int = 8          # foreground classes; scores carry one extra background slot
    fg_iou: float = 0.5
    rois_per_image: int = 16
    fg_fraction: float = 0.25

    def __post_init__(self):
        self.roi_out = tuple(self.roi_out)
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")

    @property
    def background(self) -> int:
        return self.num_classes


@dataclass
class LevelPrediction:
    box: Box
    scores: np.ndarray  # length C, renormalized over foreground classes


@dataclass
class Prediction:
    per_level: dict                  # level -> LevelPrediction
    full_image_scores: np.ndarray    # length C
    fused: np.ndarray                # length C
    predicted_class: int


# ---------------------------------------------------------------------------
# RoI pooling


def project_box_to_grid(box: Box, stride: int, grid_h: int, grid_w: int):
    """Image box -> inclusive cell range: divide by stride, round outward, clamp to >= 1 cell."""
    if box.x_min >= grid_w * stride or box.x_max <= 0 or \
       box.y_min >= grid_h * stride or box.y_max <= 0:
        raise ValueError(f"box {box} lies fully outside the {grid_h}x{grid_w} grid")
    x0 = min(max(int(math.floor(box.x_min / stride)), 0), grid_w - 1)
    y0 = min(max(int(math.floor(box.y_min / stride)), 0), grid_h - 1)
    x1 = max(min(int(math.ceil(box.x_max / stride)), grid_w), x0 + 1)
    y1 = max(min(int(math.ceil(box.y_max / stride)), grid_h), y0 + 1)
    return x0, y0, x1, y1


def roi_pool(features: np.ndarray, box: Box, stride: int, roi_out=(4, 4)) -> np.ndarray:
    """Max pool a [C,h,w] slab over the box into [C, roi_out] bins.

    Bin edges come from proportional rounding (floor/ceil), which never
    leaves a bin empty for a region of at least one cell.
    """
    features = np.asarray(features)
    c, h, w = features.shape
    x0, y0, x1, y1 = project_box_to_grid(box, stride, h, w)
    oh, ow = roi_out
    rh, rw = y1 - y0, x1 - x0
    out = np.empty((c, oh, ow), dtype=features.dtype)
    for i in range(oh):
        r0 = y0 + (i * rh) // oh
        r1 = y0 + -((-(i + 1) * rh) // oh)  # ceil
        for j in range(ow):
            c0 = x0 + (j * rw) // ow
            c1 = x0 + -((-(j + 1) * rw) // ow)
            out[:, i, j] = features[:, r0:r1, c0:c1].max(axis=(1, 2))
    return out


def roi_pool_batch(features: np.ndarray, boxes: list, stride: int, roi_out=(4, 4)) -> np.ndarray:
    return np.stack([roi_pool(features, b, stride, roi_out) for b in boxes])


# ---------------------------------------------------------------------------
# head network


def init_head_params(config: HeadConfig, in_channels: int, rng: np.random.Generator,
                     dtype=np.float32) -> dict:
    flat = in_channels * config.roi_out[0] * config.roi_out[1]
    return {
        "head.fc.weight": Tensor(ad.fan_in_uniform(rng, (flat, config.hidden), flat, dtype),
                                 requires_grad=True),
        "head.fc.bias": Tensor(np.zeros(config.hidden, dtype=dtype), requires_grad=True),
        "head.cls.weight": Tensor(ad.fan_in_uniform(rng, (config.hidden, config.num_classes + 1),
                                                    config.hidden, dtype), requires_grad=True),
        "head.cls.bias": Tensor(np.zeros(config.num_classes + 1, dtype=dtype), requires_grad=True),
        "head.reg.weight": Tensor(ad.fan_in_uniform(rng, (config.hidden, 4), config.hidden, dtype),
                                  requires_grad=True),
        "head.reg.bias": Tensor(np.zeros(4, dtype=dtype), requires_grad=True),
    }


def head_forward(params: dict, pooled, config: HeadConfig):
    """Pooled RoIs [R,C',oh,ow] -> (softmax class scores [R,C+1], deltas [R,4])."""
    x = pooled if isinstance(pooled, Tensor) else Tensor(pooled)
    r = x.shape[0]
    flat_dim = int(np.prod(x.shape[1:]))
    if flat_dim != params["head.fc.weight"].shape[0]:
        raise ad.ShapeError(
            f"pooled features flatten to {flat_dim}, head expects {params['head.fc.weight'].shape[0]}")
    hidden = ad.relu(ad.linear(ad.reshape(x, (r, flat_dim)),
                               params["head.fc.weight"], params["head.fc.bias"]))
    scores = ad.softmax(ad.linear(hidden, params["head.cls.weight"], params["head.cls.bias"]))
    deltas = ad.linear(hidden, params["head.reg.weight"], params["head.reg.bias"])
    return scores, deltas


# ---------------------------------------------------------------------------
# training targets


def head_targets(proposals: list, level_pseudo_box: Box, image_label: int,
                 config: HeadConfig, rng: np.random.Generator, image_size):
    """Label proposals against one level's pseudo box and sample a training set.

    The whole-image box joins the proposals as a guaranteed candidate. A
    proposal becomes foreground (class = image_label) when its IoU with the
    pseudo box reaches ``fg_iou`` (inclusive), background otherwise. Returns
    (rois, class_targets, delta_targets, fg_mask) for a sample of
    ``rois_per_image`` with at most ``fg_fraction`` foreground where possible.
    """
    rois = list(proposals) + [whole_image_box(image_size)]
    ious = np.array([rpn.iou(r, level_pseudo_box) for r in rois])
    fg = ious >= config.fg_iou

    fg_idx = np.flatnonzero(fg)
    bg_idx = np.flatnonzero(~fg)
    want_fg = int(round(config.fg_fraction * config.rois_per_image))
    n_fg = min(len(fg_idx), want_fg)
    n_bg = min(len(bg_idx), config.rois_per_image - n_fg)
    n_fg = min(len(fg_idx), config.rois_per_image - n_bg)
    chosen = np.concatenate([
        rng.choice(fg_idx, size=n_fg, replace=False) if n_fg else np.empty(0, dtype=np.int64),
        rng.choice(bg_idx, size=n_bg, replace=False) if n_bg else np.empty(0, dtype=np.int64),
    ]).astype(np.int64)

    sampled_rois = [rois[i] for i in chosen]
    cls_targets = np.where(fg[chosen], image_label, config.background).astype(np.int64)
    delta_targets = np.zeros((len(chosen), 4))
    fg_mask = fg[chosen]
    if fg_mask.any():
        boxes = np.stack([level_pseudo_box.as_array()] * int(fg_mask.sum()))
        anchors = np.stack([sampled_rois[i].as_array() for i in np.flatnonzero(fg_mask)])
        delta_targets[fg_mask] = rpn.encode_boxes(boxes, anchors)
    return sampled_rois, cls_targets, delta_targets, fg_mask


def head_loss(scores: Tensor, deltas: Tensor, cls_targets: np.ndarray,
              delta_targets: np.ndarray, fg_mask: np.ndarray) -> Tensor:
    """Cross entropy plus unit-weight smooth L1 on foreground RoIs, normalized by the RoI count."""
    cls = ad.cross_entropy(scores, cls_targets)
    fg = np.flatnonzero(fg_mask)
    if len(fg) == 0:
        return cls
    reg = ad.smooth_l1(ad.take_rows(deltas, fg),
                       delta_targets[fg].astype(deltas.data.dtype))
    return ad.add(cls, ad.scale(reg, 1.0 / len(cls_targets)))


# ---------------------------------------------------------------------------
# fusion


def fuse_scores(per_level_scores: list, full_image_scores: np.ndarray):
    """Arithmetic mean of the n level vectors and the full-image vector.

    Returns (fused vector, argmax class); argmax ties resolve to the lowest
    class index.
    """
    full = np.asarray(full_image_scores, dtype=np.float64)
    vectors = [np.asarray(v, dtype=np.float64) for v in per_level_scores]
    for v in vectors:
        if v.shape != full.shape:
            raise ValueError(f"score length mismatch: {v.shape} vs {full.shape}")
    fused = np.mean(vectors + [full], axis=0)
    return fused, int(fused.argmax())


def renormalize_foreground(scores: np.ndarray, num_classes: int) -> np.ndarray:
    """Drop the background slot and rescale the foreground scores to sum to 1."""
    fg = np.asarray(scores, dtype=np.float64)[:num_classes]
    total = fg.sum()
    if total <= 0.0:
        return np.full(num_classes, 1.0 / num_classes)
    return fg / total
