"""Stage-wise training and end-to-end inference.

Training runs three stages in order:

1. the classification network (backbone + cam head) on image-level labels;
2. the region proposal network, its convolutional stages cloned from stage 1
   and then fine-tuned end to end against the attention pseudo boxes;
3. one localization head per attention level, trained on frozen proposals
   and frozen shared features against that level's pseudo boxes.

Each stage owns dedicated random streams spawned from the one training seed,
so a stage rerun from checkpoints reproduces the composed run bit for bit.
Inference shares one backbone pass per image across the proposal network and
all heads.
"""

from __future__ import annotations

import os
import threading

import numpy as np

from . import attention as att
from . import autodiff as ad
from . import backbone as bb
from . import heads as hd
from . import rpn
from .attention import whole_image_box
from .autodiff import Tensor
from .config import RunConfig, load_run_config

LOG_LINE = "stage={stage} epoch={epoch} loss={loss:.6f} acc={acc:.4f}"

# stream indices off the training seed, one block per purpose
_STREAMS = 8
(_S_INIT_MAEN, _S_SHUFFLE_MAEN, _S_INIT_DLN, _S_SAMPLE_RPN,
 _S_SHUFFLE_RPN, _S_INIT_HEADS, _S_SAMPLE_HEADS, _S_SHUFFLE_HEADS) = range(_STREAMS)


def _rng(config: RunConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(config.train.seed).spawn(_STREAMS)[stream])


class TrainedModel:
    """Checkpoints plus the live parameter tables used for inference."""

    def __init__(self, maen: bb.Checkpoint, dln: bb.Checkpoint, heads: dict,
                 config: RunConfig):
        self.maen = maen
        self.dln = dln
        self.heads = heads
        self.config = config
        self.maen_params = bb.checkpoint_to_params(maen, requires_grad=False)
        self.dln_params = bb.checkpoint_to_params(dln, requires_grad=False)
        self.head_params = {lvl: bb.checkpoint_to_params(c, requires_grad=False)
                            for lvl, c in heads.items()}
        gh, gw = config.backbone.grid_size
        self.anchors = rpn.generate_anchors(gh, gw, config.anchor)
        self.backbone_forwards = 0  # inference op-count probe
        self._count_lock = threading.Lock()

    def _count_forward(self):
        with self._count_lock:
            self.backbone_forwards += 1

    @property
    def levels(self) -> tuple:
        return self.config.backbone.tap_levels


def _check_loss(loss: Tensor) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise RuntimeError(f"training diverged: loss = {value}")
    return value


def _check_view(view, config: RunConfig) -> np.ndarray:
    n_classes = int(view.labels.max()) + 1
    if n_classes < 2:
        raise ValueError(f"dataset must have at least 2 classes, found {n_classes}")
    if n_classes > config.backbone.num_classes:
        raise ValueError(
            f"dataset has {n_classes} classes but the backbone is configured "
            f"for {config.backbone.num_classes}")
    return np.stack(view.images)


def pseudo_box_table(images: np.ndarray, maen_params: dict,
                     config: RunConfig) -> list:
    """Per image: level -> pseudo box, from the frozen classification network."""
    return [dict(att.pseudo_boxes(img, maen_params, config.backbone)) for img in images]


def train_maen(view, config: RunConfig, log_fn=None) -> bb.Checkpoint:
    """Stage 1: the attention-extraction classifier on image-level labels."""
    ad.enable_buffer_reuse()
    log = log_fn or (lambda line: None)
    tc, bc = config.train, config.backbone
    images = _check_view(view, config)
    labels = view.labels
    n = len(view)

    rng_shuffle = _rng(config, _S_SHUFFLE_MAEN)
    params = bb.init_maen_params(bc, _rng(config, _S_INIT_MAEN))
    opt = ad.SGD(params, tc.learning_rate, tc.momentum, tc.weight_decay)
    for epoch in range(tc.epochs_maen):
        if epoch == tc.decay_epoch_maen:
            opt.learning_rate = opt.learning_rate / tc.decay_factor
        perm = rng_shuffle.permutation(n)
        loss_sum = 0.0
        correct = 0
        for start in range(0, n, tc.batch_maen):
            idx = perm[start : start + tc.batch_maen]
            fs = bb.maen_forward(params, Tensor(images[idx]), bc)
            probs = ad.softmax(fs.cam_logits)
            loss = ad.cross_entropy(probs, labels[idx])
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            loss_sum += _check_loss(loss) * len(idx)
            correct += int((probs.data.argmax(axis=1) == labels[idx]).sum())
        log(LOG_LINE.format(stage=1, epoch=epoch + 1, loss=loss_sum / n, acc=correct / n))
    return bb.params_to_checkpoint(params, "maen")


def train_rpn(view, config: RunConfig, maen_ckpt: bb.Checkpoint, log_fn=None,
              boxes: list | None = None) -> bb.Checkpoint:
    """Stage 2: proposal head over the cloned (and kept frozen) shared stages.

    Freezing the clone preserves the class separability of the shared map for
    the stage-3 heads; fine-tuning the whole stack on pure objectness erases
    it within one epoch at this scale. The frozen trunk also lets every epoch
    reuse one cached forward pass per image.
    """
    ad.enable_buffer_reuse()
    log = log_fn or (lambda line: None)
    tc, bc, ac = config.train, config.backbone, config.anchor
    images = _check_view(view, config)
    n = len(view)
    if boxes is None:
        boxes = pseudo_box_table(images, bb.checkpoint_to_params(maen_ckpt, False), config)

    rng_init = _rng(config, _S_INIT_DLN)
    rng_sample = _rng(config, _S_SAMPLE_RPN)
    rng_shuffle = _rng(config, _S_SHUFFLE_RPN)

    fresh = dict(bb.init_stage_params(bc, rng_init))
    fresh.update(rpn.init_rpn_params(bc.stage_channels[-1], ac, rng_init))
    dln_ckpt = bb.clone_shared_weights(maen_ckpt, bb.params_to_checkpoint(fresh, "dln"))
    params = bb.checkpoint_to_params(dln_ckpt)
    trunk = {name: p for name, p in params.items() if not name.startswith("rpn.")}
    head = {name: p for name, p in params.items() if name.startswith("rpn.")}
    for p in trunk.values():
        p.requires_grad = False

    gh, gw = bc.grid_size
    anchors = rpn.generate_anchors(gh, gw, ac)
    batches = [rpn.label_anchors(anchors, list(boxes[i].values()), ac, rng_sample)
               for i in range(n)]
    with ad.no_grad():
        late_maps = [bb.stage_forward(params, Tensor(images[i : i + 1]), bc)[-1].data
                     for i in range(n)]

    opt = ad.SGD(head, tc.learning_rate, tc.momentum, tc.weight_decay)
    for epoch in range(tc.epochs_rpn):
        if epoch == tc.decay_epoch_rpn:
            opt.learning_rate = opt.learning_rate / tc.decay_factor
        perm = rng_shuffle.permutation(n)
        loss_sum = 0.0
        hit = total = 0
        for i in perm:
            batch = batches[i]
            batch.sampled = rpn.sample_for_loss(batch.labels, ac, rng_sample)
            probs, deltas = rpn.rpn_forward(params, Tensor(late_maps[i]), ac)
            loss = rpn.rpn_loss(probs, deltas, batch, ac)
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            loss_sum += _check_loss(loss)
            predicted = probs.data.argmax(axis=1)[batch.sampled]
            hit += int((predicted == batch.labels[batch.sampled]).sum())
            total += len(batch.sampled)
        log(LOG_LINE.format(stage=2, epoch=epoch + 1, loss=loss_sum / n, acc=hit / total))
    for p in trunk.values():
        p.requires_grad = True
    return bb.params_to_checkpoint(params, "dln")


def train_heads(view, config: RunConfig, maen_ckpt: bb.Checkpoint,
                dln_ckpt: bb.Checkpoint, log_fn=None,
                boxes: list | None = None) -> dict:
    """Stage 3: per-level heads over frozen shared features and frozen proposals."""
    ad.enable_buffer_reuse()
    log = log_fn or (lambda line: None)
    tc, bc, ac, hc = config.train, config.backbone, config.anchor, config.head
    images = _check_view(view, config)
    labels = view.labels
    n = len(view)
    image_size = bc.input_size
    if boxes is None:
        boxes = pseudo_box_table(images, bb.checkpoint_to_params(maen_ckpt, False), config)

    rng_init = _rng(config, _S_INIT_HEADS)
    rng_sample = _rng(config, _S_SAMPLE_HEADS)
    rng_shuffle = _rng(config, _S_SHUFFLE_HEADS)

    dln_params = bb.checkpoint_to_params(dln_ckpt, requires_grad=False)
    gh, gw = bc.grid_size
    anchors = rpn.generate_anchors(gh, gw, ac)
    late_maps = []
    proposal_cache = []
    with ad.no_grad():
        for i in range(n):
            late = bb.stage_forward(dln_params, Tensor(images[i : i + 1]), bc)[-1]
            probs, deltas = rpn.rpn_forward(dln_params, late, ac)
            props = rpn.propose(probs, deltas, anchors, ac, image_size)
            late_maps.append(late.data[0])
            proposal_cache.append([box for box, _ in props])

    shared_channels = bc.stage_channels[-1]
    params = {}
    opts = {}
    for level in bc.tap_levels:
        params[level] = hd.init_head_params(hc, shared_channels, rng_init)
        opts[level] = ad.SGD(params[level], tc.learning_rate, tc.momentum, tc.weight_decay)

    stride = bc.tap_stride("late")
    for epoch in range(tc.epochs_heads):
        if epoch == tc.decay_epoch_heads:
            for opt in opts.values():
                opt.learning_rate = opt.learning_rate / tc.decay_factor
        perm = rng_shuffle.permutation(n)
        loss_sum = 0.0
        hit = total = 0
        for i in perm:
            for level in bc.tap_levels:
                rois, cls_t, delta_t, fg = hd.head_targets(
                    proposal_cache[i], boxes[i][level], int(labels[i]), hc,
                    rng_sample, image_size)
                pooled = hd.roi_pool_batch(late_maps[i], rois, stride, hc.roi_out)
                scores, deltas = hd.head_forward(params[level], pooled, hc)
                loss = hd.head_loss(scores, deltas, cls_t, delta_t, fg)
                opts[level].zero_grad()
                ad.backward(loss)
                opts[level].step()
                loss_sum += _check_loss(loss)
                hit += int((scores.data.argmax(axis=1) == cls_t).sum())
                total += len(cls_t)
        steps = n * len(bc.tap_levels)
        log(LOG_LINE.format(stage=3, epoch=epoch + 1, loss=loss_sum / steps, acc=hit / total))
    return {level: bb.params_to_checkpoint(params[level], f"head.{level}")
            for level in bc.tap_levels}


def train_stagewise(view, config: RunConfig, log_fn=None) -> TrainedModel:
    """All three stages in order over a training view (images and labels only)."""
    maen_ckpt = train_maen(view, config, log_fn)
    images = _check_view(view, config)
    boxes = pseudo_box_table(images, bb.checkpoint_to_params(maen_ckpt, False), config)
    dln_ckpt = train_rpn(view, config, maen_ckpt, log_fn, boxes=boxes)
    head_ckpts = train_heads(view, config, maen_ckpt, dln_ckpt, log_fn, boxes=boxes)
    return TrainedModel(maen_ckpt, dln_ckpt, head_ckpts, config)


# ---------------------------------------------------------------------------
# inference


def _refine_box(delta: np.ndarray, proposal, image_size):
    decoded = rpn.decode_boxes(delta[None], proposal.as_array()[None], image_size)[0]
    if decoded[2] - decoded[0] <= 0 or decoded[3] - decoded[1] <= 0:
        return proposal  # refinement collapsed under clipping; keep the proposal
    return att.Box(*decoded)


def _head_contribution(model: TrainedModel, level: str, pooled: np.ndarray,
                       boxes: list, image_size):
    hc = model.config.head
    scores_t, deltas_t = hd.head_forward(model.head_params[level], pooled, hc)
    s, d = scores_t.data, deltas_t.data
    confidence = 1.0 - s[: len(boxes), hc.background]
    r = int(np.argmax(confidence))
    level_pred = hd.LevelPrediction(
        box=_refine_box(d[r], boxes[r], image_size),
        scores=hd.renormalize_foreground(s[r], hc.num_classes),
    )
    full_scores = hd.renormalize_foreground(s[-1], hc.num_classes)
    return level_pred, full_scores


def _propose_boxes(model: TrainedModel, late, image_size):
    probs, deltas = rpn.rpn_forward(model.dln_params, late, model.config.anchor)
    props = rpn.propose(probs, deltas, model.anchors, model.config.anchor, image_size)
    return [box for box, _ in props] or [whole_image_box(image_size)]


def infer(image, model: TrainedModel) -> hd.Prediction:
    """One shared backbone pass, one proposal pass, all heads on the same map."""
    bc = model.config.backbone
    image_size = bc.input_size
    stride = bc.tap_stride("late")
    with ad.no_grad():
        late = bb.stage_forward(model.dln_params, Tensor(np.asarray(image)[None]), bc)[-1]
        model._count_forward()
        boxes = _propose_boxes(model, late, image_size)
        rois = boxes + [whole_image_box(image_size)]
        pooled = hd.roi_pool_batch(late.data[0], rois, stride, model.config.head.roi_out)
        per_level = {}
        fulls = []
        for level in model.levels:
            pred, full = _head_contribution(model, level, pooled, boxes, image_size)
            per_level[level] = pred
            fulls.append(full)
    full_image_scores = np.mean(fulls, axis=0)
    fused, cls = hd.fuse_scores([per_level[lvl].scores for lvl in model.levels],
                                full_image_scores)
    return hd.Prediction(per_level=per_level, full_image_scores=full_image_scores,
                         fused=fused, predicted_class=cls)


def infer_separate(image, model: TrainedModel) -> hd.Prediction:
    """Reference mode: one full network pass per level (no feature sharing)."""
    bc = model.config.backbone
    image_size = bc.input_size
    stride = bc.tap_stride("late")
    per_level = {}
    fulls = []
    with ad.no_grad():
        for level in model.levels:
            late = bb.stage_forward(model.dln_params, Tensor(np.asarray(image)[None]), bc)[-1]
            model._count_forward()
            boxes = _propose_boxes(model, late, image_size)
            rois = boxes + [whole_image_box(image_size)]
            pooled = hd.roi_pool_batch(late.data[0], rois, stride, model.config.head.roi_out)
            pred, full = _head_contribution(model, level, pooled, boxes, image_size)
            per_level[level] = pred
            fulls.append(full)
    full_image_scores = np.mean(fulls, axis=0)
    fused, cls = hd.fuse_scores([per_level[lvl].scores for lvl in model.levels],
                                full_image_scores)
    return hd.Prediction(per_level=per_level, full_image_scores=full_image_scores,
                         fused=fused, predicted_class=cls)


def maen_pseudo_box(image, model: TrainedModel, level: str = "cam") -> att.Box:
    """The classification network's direct pseudo box for one image."""
    return dict(att.pseudo_boxes(np.asarray(image), model.maen_params,
                                 model.config.backbone))[level]


# ---------------------------------------------------------------------------
# model directory


def save_model(model: TrainedModel, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    bb.save_checkpoint(model.maen, os.path.join(out_dir, "maen.ckpt"))
    bb.save_checkpoint(model.dln, os.path.join(out_dir, "dln.ckpt"))
    for level, ckpt in model.heads.items():
        bb.save_checkpoint(ckpt, os.path.join(out_dir, f"head_{level}.ckpt"))
    with open(os.path.join(out_dir, "model_config.txt"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(model.config.to_lines())


def load_model(model_dir) -> TrainedModel:
    config = load_run_config(os.path.join(model_dir, "model_config.txt"))
    maen = bb.load_checkpoint(os.path.join(model_dir, "maen.ckpt"))
    dln = bb.load_checkpoint(os.path.join(model_dir, "dln.ckpt"))
    heads = {level: bb.load_checkpoint(os.path.join(model_dir, f"head_{level}.ckpt"))
             for level in config.backbone.tap_levels}
    return TrainedModel(maen, dln, heads, config)
