"""Region proposal machinery over the shared feature grid.

Nine anchors (3 scales x 3 aspect ratios) sit on every cell of the stride-8
feature map. Anchors are labeled against the attention-derived pseudo boxes,
a small conv head predicts objectness and box deltas, and training minimizes
a two-term loss: log loss over a sampled anchor set plus a weighted smooth-L1
regression over the positives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import Box
from .autodiff import Tensor

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class AnchorConfig:
    scales: tuple = (16.0, 32.0, 48.0)
    ratios: tuple = (0.5, 1.0, 2.0)  # height/width
    stride: int = 8
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    nms_iou: float = 0.7
    pre_nms_top: int = 64
    post_nms_top: int = 16
    loss_balance: float = 10.0  # weight of the regression term
    anchors_per_image_sampled: int = 64
    rpn_channels: int = 128

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.ratios = tuple(float(r) for r in self.ratios)
        if len(self.scales) * len(self.ratios) != 9:
            raise ValueError(
                f"expected 9 anchors from 3 scales x 3 ratios, got "
                f"{len(self.scales)} x {len(self.ratios)}")
        if not 0.0 <= self.neg_iou < self.pos_iou <= 1.0:
            raise ValueError(f"need 0 <= neg_iou < pos_iou <= 1, got {self.neg_iou}, {self.pos_iou}")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)


@dataclass
class AnchorBatch:
    anchors: np.ndarray          # [A,4]
    labels: np.ndarray           # [A] in {POSITIVE, NEGATIVE, IGNORE}
    targets: np.ndarray          # [A,4], valid where labels == POSITIVE
    sampled: np.ndarray          # indices marked for the loss
    n_positions: int             # anchor positions (grid cells)


# ---------------------------------------------------------------------------
# geometry


def generate_anchors(grid_h: int, grid_w: int, config: AnchorConfig) -> np.ndarray:
    """All anchors as [grid_h * grid_w * 9, 4], cell-major then (scale, ratio).

    Anchors center on cell centers scaled by the stride; a scale-s, ratio-r
    anchor spans width s/sqrt(r) and height s*sqrt(r). Not clipped.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError(f"grid extents must be >= 1, got {grid_h}x{grid_w}")
    shapes = []
    for s in config.scales:
        for r in config.ratios:
            w = s / math.sqrt(r)
            h = s * math.sqrt(r)
            shapes.append((w, h))
    shapes = np.array(shapes)  # [9,2]

    cx = (np.arange(grid_w) + 0.5) * config.stride
    cy = (np.arange(grid_h) + 0.5) * config.stride
    centers = np.stack(np.meshgrid(cx, cy), axis=-1).reshape(-1, 2)  # [cells,2] row-major

    half = shapes / 2.0
    out = np.empty((centers.shape[0], shapes.shape[0], 4))
    out[:, :, 0] = centers[:, None, 0] - half[None, :, 0]
    out[:, :, 1] = centers[:, None, 1] - half[None, :, 1]
    out[:, :, 2] = centers[:, None, 0] + half[None, :, 0]
    out[:, :, 3] = centers[:, None, 1] + half[None, :, 1]
    return out.reshape(-1, 4)


def iou(a: Box, b: Box) -> float:
    """Intersection over union with real-valued areas (half-open boxes)."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N,4] vs [M,4] corner-format boxes."""
    boxes = np.asarray(boxes, dtype=np.float64)
    others = np.asarray(others, dtype=np.float64)
    iw = np.minimum(boxes[:, None, 2], others[None, :, 2]) - np.maximum(boxes[:, None, 0], others[None, :, 0])
    ih = np.minimum(boxes[:, None, 3], others[None, :, 3]) - np.maximum(boxes[:, None, 1], others[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    area_b = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / union, 0.0)


def encode_box(box, anchor) -> np.ndarray:
    """(tx, ty, tw, th) of a target box relative to an anchor."""
    return encode_boxes(np.asarray([_as_corners(box)]), np.asarray([_as_corners(anchor)]))[0]


def decode_box(delta, anchor, image_size=None) -> Box:
    out = decode_boxes(np.asarray([delta], dtype=np.float64),
                       np.asarray([_as_corners(anchor)]), image_size)[0]
    return Box(*out)


def _as_corners(box) -> np.ndarray:
    if isinstance(box, Box):
        return box.as_array()
    return np.asarray(box, dtype=np.float64)


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    bw, bh = boxes[:, 2] - boxes[:, 0], boxes[:, 3] - boxes[:, 1]
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    if np.any(bw <= 0) or np.any(bh <= 0) or np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("encode_boxes needs positive widths and heights")
    tx = ((boxes[:, 0] + boxes[:, 2]) - (anchors[:, 0] + anchors[:, 2])) / 2.0 / aw
    ty = ((boxes[:, 1] + boxes[:, 3]) - (anchors[:, 1] + anchors[:, 3])) / 2.0 / ah
    tw = np.log(bw / aw)
    th = np.log(bh / ah)
    return np.stack([tx, ty, tw, th], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray, image_size=None) -> np.ndarray:
    """Exact inverse of encode_boxes, then (optionally) clipped to the image."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("decode_boxes needs positive anchor extents")
    cx = (anchors[:, 0] + anchors[:, 2]) / 2.0 + deltas[:, 0] * aw
    cy = (anchors[:, 1] + anchors[:, 3]) / 2.0 + deltas[:, 1] * ah
    w = np.exp(deltas[:, 2]) * aw
    h = np.exp(deltas[:, 3]) * ah
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if image_size is not None:
        ih, iw = image_size
        out[:, 0::2] = np.clip(out[:, 0::2], 0.0, float(iw))
        out[:, 1::2] = np.clip(out[:, 1::2], 0.0, float(ih))
    return out


# ---------------------------------------------------------------------------
# anchor labeling


def label_anchors(anchors: np.ndarray, pseudo_boxes: list, config: AnchorConfig,
                  rng: np.random.Generator) -> AnchorBatch:
    """Assign {positive, negative, ignore} labels and regression targets.

    Positive when the best IoU over pseudo boxes reaches ``pos_iou``, or when
    the anchor attains a box's global-max IoU (one forced positive per box,
    first such anchor). Negative when the best IoU is at most ``neg_iou`` and
    the anchor was not forced. A sample of at most
    ``anchors_per_image_sampled`` anchors (1:1 positive:negative where
    possible) is marked for the loss.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    if len(pseudo_boxes) < 1:
        raise ValueError("label_anchors needs at least one pseudo box")
    gt = np.stack([_as_corners(b) for b in pseudo_boxes])
    m = iou_matrix(anchors, gt)
    best_iou = m.max(axis=1)
    best_gt = m.argmax(axis=1)

    labels = np.full(len(anchors), IGNORE, dtype=np.int64)
    labels[best_iou <= config.neg_iou] = NEGATIVE
    labels[best_iou >= config.pos_iou] = POSITIVE
    for j in range(gt.shape[0]):
        forced = int(m[:, j].argmax())  # first anchor attaining the column max
        if labels[forced] != POSITIVE:
            labels[forced] = POSITIVE
            best_gt[forced] = j

    targets = np.zeros_like(anchors)
    pos = np.flatnonzero(labels == POSITIVE)
    targets[pos] = encode_boxes(gt[best_gt[pos]], anchors[pos])

    sampled = sample_for_loss(labels, config, rng)
    return AnchorBatch(anchors=anchors, labels=labels, targets=targets,
                       sampled=sampled, n_positions=len(anchors) // config.anchors_per_cell)


def sample_for_loss(labels: np.ndarray, config: AnchorConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Pick at most ``anchors_per_image_sampled`` anchors, 1:1 pos:neg where possible.

    A shortfall on either side is filled from the other, so the cap is reached
    whenever enough labeled anchors exist.
    """
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    cap = config.anchors_per_image_sampled
    n_pos = min(len(pos), cap // 2)
    n_neg = min(len(neg), cap - n_pos)
    n_pos = min(len(pos), cap - n_neg)
    return np.concatenate([
        rng.choice(pos, size=n_pos, replace=False) if n_pos else np.empty(0, dtype=np.int64),
        rng.choice(neg, size=n_neg, replace=False) if n_neg else np.empty(0, dtype=np.int64),
    ]).astype(np.int64)


# ---------------------------------------------------------------------------
# loss


def rpn_loss(obj_probs: Tensor, deltas: Tensor, batch: AnchorBatch,
             config: AnchorConfig) -> Tensor:
    """Two-class log loss over the sampled anchors plus weighted regression.

    loss = mean_cls(sampled) + balance / n_positions * sum smooth_l1(positives)

    ``obj_probs`` rows are (background, region) probabilities aligned with
    ``batch.anchors``; regression covers the sampled positive anchors only.
    """
    a = len(batch.anchors)
    if obj_probs.shape != (a, 2) or deltas.shape != (a, 4):
        raise ad.ShapeError(
            f"scores/deltas misaligned with anchors: {obj_probs.shape}, {deltas.shape} vs {a} anchors")
    cls = ad.cross_entropy(ad.take_rows(obj_probs, batch.sampled), batch.labels[batch.sampled])
    pos = batch.sampled[batch.labels[batch.sampled] == POSITIVE]
    if len(pos) == 0:
        return cls
    reg = ad.smooth_l1(ad.take_rows(deltas, pos), batch.targets[pos].astype(deltas.data.dtype))
    return ad.add(cls, ad.scale(reg, config.loss_balance / batch.n_positions))


# ---------------------------------------------------------------------------
# proposals


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float) -> list:
    """Greedy suppression; keeps indices in score-descending order, ties to the lower index."""
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(boxes) != len(scores):
        raise ValueError(f"nms needs matching lists, got {len(boxes)} boxes, {len(scores)} scores")
    order = np.argsort(-scores, kind="stable")
    kept = []
    for i in order:
        box_i = Box(*boxes[i])
        if all(iou(box_i, Box(*boxes[j])) <= iou_thresh for j in kept):
            kept.append(int(i))
    return kept


def propose(obj_probs: np.ndarray, deltas: np.ndarray, anchors: np.ndarray,
            config: AnchorConfig, image_size) -> list:
    """Decode, clip, keep the pre-NMS top scores, suppress, cap the output.

    Returns at most ``post_nms_top`` (Box, score) pairs; boxes that collapse
    to zero extent after clipping are dropped.
    """
    obj_probs = obj_probs.data if isinstance(obj_probs, Tensor) else np.asarray(obj_probs)
    deltas = deltas.data if isinstance(deltas, Tensor) else np.asarray(deltas)
    scores = obj_probs[:, 1].astype(np.float64)
    decoded = decode_boxes(deltas, anchors, image_size)
    valid = np.flatnonzero((decoded[:, 2] > decoded[:, 0]) & (decoded[:, 3] > decoded[:, 1]))
    if len(valid) == 0:
        return []
    decoded, scores = decoded[valid], scores[valid]
    top = np.argsort(-scores, kind="stable")[: config.pre_nms_top]
    kept = nms(decoded[top], scores[top], config.nms_iou)[: config.post_nms_top]
    return [(Box(*decoded[top[i]]), float(scores[top[i]])) for i in kept]


# ---------------------------------------------------------------------------
# head


def init_rpn_params(in_channels: int, config: AnchorConfig,
                    rng: np.random.Generator, dtype=np.float32) -> dict:
    """3x3 conv trunk plus 1x1 objectness (2k channels) and delta (4k) branches."""
    k = config.anchors_per_cell
    mid = config.rpn_channels
    return {
        "rpn.conv.weight": Tensor(ad.fan_in_uniform(rng, (mid, in_channels, 3, 3),
                                                    in_channels * 9, dtype), requires_grad=True),
        "rpn.conv.bias": Tensor(np.zeros(mid, dtype=dtype), requires_grad=True),
        "rpn.obj.weight": Tensor(ad.fan_in_uniform(rng, (2 * k, mid, 1, 1), mid, dtype),
                                 requires_grad=True),
        "rpn.obj.bias": Tensor(np.zeros(2 * k, dtype=dtype), requires_grad=True),
        "rpn.reg.weight": Tensor(ad.fan_in_uniform(rng, (4 * k, mid, 1, 1), mid, dtype),
                                 requires_grad=True),
        "rpn.reg.bias": Tensor(np.zeros(4 * k, dtype=dtype), requires_grad=True),
    }


def rpn_forward(params: dict, shared_map: Tensor, config: AnchorConfig):
    """Slide the head over the shared map; returns per-anchor probs [A,2] and deltas [A,4].

    Channel layout follows the anchor order of ``generate_anchors``: grid
    cells row-major, then anchor index within the cell.
    """
    n, _, h, w = shared_map.shape
    if n != 1:
        raise ad.ShapeError(f"rpn_forward expects a single image, got batch {n}")
    k = config.anchors_per_cell
    trunk = ad.relu(ad.conv2d(shared_map, params["rpn.conv.weight"], params["rpn.conv.bias"],
                              stride=1, pad=1))
    obj = ad.conv2d(trunk, params["rpn.obj.weight"], params["rpn.obj.bias"])
    reg = ad.conv2d(trunk, params["rpn.reg.weight"], params["rpn.reg.bias"])
    obj_logits = ad.reshape(ad.transpose(obj, (0, 2, 3, 1)), (h * w * k, 2))
    deltas = ad.reshape(ad.transpose(reg, (0, 2, 3, 1)), (h * w * k, 4))
    return ad.softmax(obj_logits), deltas
