"""Set-prediction training: match cost, composite loss, SGD loop, checkpoints.

Classification is binary cross-entropy over the 36 combo logits (matched
queries target a one-hot at their target's combo; unmatched queries target
all zeros), so the combined attribute scores are what carry the
classification loss. Box and mask terms apply to matched pairs only.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .annotations import AnnotationSet
from .geometry import rasterize
from .labels import ComboTable, LabelSpace, build_combo_table
from .matching import MatchResult, hungarian_match
from .model import (ModelConfig, QueryOutputs, forward, init_params,
                    save_checkpoint, load_checkpoint)
from .tensor import Tape, Tensor, backward


@dataclass
class TrainConfig:
    learning_rate: float = 0.02
    momentum: float = 0.9
    epochs: int = 48
    max_steps: Optional[int] = None
    batch_size: int = 4
    seed: int = 0
    grad_clip: Optional[float] = 5.0
    loss_weights: Dict[str, float] = field(default_factory=lambda: {
        "cls": 2.0, "l1": 5.0, "giou": 2.0, "mask": 5.0, "dice": 5.0})
    cost_weights: Dict[str, float] = field(default_factory=lambda: {
        "cls": 2.0, "l1": 5.0, "giou": 2.0, "mask": 5.0, "dice": 5.0})
    checkpoint_every: Optional[int] = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class LossBreakdown:
    total: float
    cls: float
    box_l1: float
    box_giou: float
    mask_bce: float
    mask_dice: float

    def to_json(self, step: int) -> str:
        return json.dumps({"step": step, "total": self.total, "cls": self.cls,
                           "box_l1": self.box_l1, "box_giou": self.box_giou,
                           "mask_bce": self.mask_bce, "mask_dice": self.mask_dice})


@dataclass
class TargetInstance:
    combo_id: int
    box: np.ndarray        # (4,) cx, cy, w, h normalized
    mask_feat: np.ndarray  # (Hf, Wf) fractional coverage in [0, 1]


def targets_from_annotations(aset: AnnotationSet, image_id: int,
                             stride: int, table: ComboTable) -> List[TargetInstance]:
    im = aset.image_by_id(image_id)
    hf, wf = im.height // stride, im.width // stride
    out = []
    for a in aset.annotations_for(image_id):
        combo_id = table.lookup(a.category_id, a.state, a.position)
        x, y, w, h = a.bbox
        box = np.array([(x + w / 2) / im.width, (y + h / 2) / im.height,
                        w / im.width, h / im.height])
        bits = rasterize(a.segmentation, im.height, im.width).bits.astype(np.float64)
        mask_feat = bits.reshape(hf, stride, wf, stride).mean(axis=(1, 3))
        out.append(TargetInstance(combo_id=combo_id, box=box, mask_feat=mask_feat))
    return out


def _np_sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _np_bce(x, z):
    return np.maximum(x, 0.0) - x * z + np.log1p(np.exp(-np.abs(x)))


def _np_giou(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """GIoU between row-aligned (k, 4) cxcywh arrays."""
    ax1, ay1 = boxes_a[:, 0] - boxes_a[:, 2] / 2, boxes_a[:, 1] - boxes_a[:, 3] / 2
    ax2, ay2 = boxes_a[:, 0] + boxes_a[:, 2] / 2, boxes_a[:, 1] + boxes_a[:, 3] / 2
    bx1, by1 = boxes_b[:, 0] - boxes_b[:, 2] / 2, boxes_b[:, 1] - boxes_b[:, 3] / 2
    bx2, by2 = boxes_b[:, 0] + boxes_b[:, 2] / 2, boxes_b[:, 1] + boxes_b[:, 3] / 2
    iw = np.maximum(0.0, np.minimum(ax2, bx2) - np.maximum(ax1, bx1))
    ih = np.maximum(0.0, np.minimum(ay2, by2) - np.maximum(ay1, by1))
    inter = iw * ih
    union = boxes_a[:, 2] * boxes_a[:, 3] + boxes_b[:, 2] * boxes_b[:, 3] - inter
    hull = ((np.maximum(ax2, bx2) - np.minimum(ax1, bx1))
            * (np.maximum(ay2, by2) - np.minimum(ay1, by1)))
    return inter / union - (hull - union) / hull


def build_cost(outputs: QueryOutputs, targets: Sequence[TargetInstance],
               weights: Dict[str, float]) -> np.ndarray:
    """(num_queries, num_targets) matching cost; plain numpy, no gradients."""
    if not targets:
        raise ValueError("build_cost needs at least one target")
    nq = outputs.boxes.shape[0]
    nt = len(targets)
    combo_logits = outputs.combo_logits.data
    boxes = outputs.boxes.data
    masks = outputs.mask_logits.data.reshape(nq, -1)
    cost = np.zeros((nq, nt))
    for t_idx, tgt in enumerate(targets):
        tgt_mask = tgt.mask_feat.reshape(-1)
        cls = -_np_sigmoid(combo_logits[:, tgt.combo_id])
        l1 = np.abs(boxes - tgt.box[None, :]).sum(axis=1)
        gi = _np_giou(boxes, np.broadcast_to(tgt.box, (nq, 4)))
        bce = _np_bce(masks, np.broadcast_to(tgt_mask, masks.shape)).mean(axis=1)
        p = _np_sigmoid(masks)
        dice = (2.0 * (p * tgt_mask[None, :]).sum(axis=1) + 1.0) / (
            p.sum(axis=1) + tgt_mask.sum() + 1.0)
        cost[:, t_idx] = (weights["cls"] * cls + weights["l1"] * l1
                          + weights["giou"] * (1.0 - gi)
                          + weights["mask"] * bce
                          + weights["dice"] * (1.0 - dice))
    return cost


def _column(t: Tensor, j: int) -> Tensor:
    return T.slice_axis(t, 1, j, j + 1)


def _giou_tensor(pred: Tensor, tgt: np.ndarray) -> Tensor:
    """Differentiable GIoU column, (k, 1), for cxcywh preds vs constants."""
    k = pred.shape[0]
    cx, cy = _column(pred, 0), _column(pred, 1)
    w, h = _column(pred, 2), _column(pred, 3)
    x1, x2 = T.sub(cx, T.scale(w, 0.5)), T.add(cx, T.scale(w, 0.5))
    y1, y2 = T.sub(cy, T.scale(h, 0.5)), T.add(cy, T.scale(h, 0.5))
    tx1 = Tensor((tgt[:, 0] - tgt[:, 2] / 2).reshape(k, 1))
    tx2 = Tensor((tgt[:, 0] + tgt[:, 2] / 2).reshape(k, 1))
    ty1 = Tensor((tgt[:, 1] - tgt[:, 3] / 2).reshape(k, 1))
    ty2 = Tensor((tgt[:, 1] + tgt[:, 3] / 2).reshape(k, 1))
    t_area = Tensor((tgt[:, 2] * tgt[:, 3]).reshape(k, 1))
    iw = T.relu(T.sub(T.minimum(x2, tx2), T.maximum(x1, tx1)))
    ih = T.relu(T.sub(T.minimum(y2, ty2), T.maximum(y1, ty1)))
    inter = T.mul(iw, ih)
    union = T.sub(T.add(T.mul(w, h), t_area), inter)
    hull = T.mul(T.sub(T.maximum(x2, tx2), T.minimum(x1, tx1)),
                 T.sub(T.maximum(y2, ty2), T.minimum(y1, ty1)))
    return T.sub(T.div(inter, union), T.div(T.sub(hull, union), hull))


def compute_loss(outputs: QueryOutputs, targets: Sequence[TargetInstance],
                 match: MatchResult, cfg: TrainConfig,
                 table: Optional[ComboTable] = None) -> Tuple[Tensor, LossBreakdown]:
    """Differentiable total plus a float breakdown of the components."""
    table = table or build_combo_table(LabelSpace())
    nq, n_combos = outputs.combo_logits.shape
    w = cfg.loss_weights

    cls_targets = np.zeros((nq, n_combos))
    for q, t_idx in match.pairs:
        combo = targets[t_idx].combo_id
        if not (0 <= combo < n_combos):
            raise ValueError(f"target combo {combo} outside table")
        cls_targets[q, combo] = 1.0
    # Positive entries are 1-in-36 at best, so weight them by n_combos to keep
    # the matched-combo gradient from being diluted by the negative sea.
    cls_weights = 1.0 + (n_combos - 1.0) * cls_targets
    cls = T.mean_all(T.mul(T.bce_with_logits(outputs.combo_logits, Tensor(cls_targets)),
                           Tensor(cls_weights)))

    zero = Tensor(np.zeros(()))
    box_l1, box_giou, mask_bce, mask_dice = zero, zero, zero, zero
    if match.pairs:
        k = len(match.pairs)
        sel = np.zeros((k, nq))
        for i, (q, _) in enumerate(match.pairs):
            sel[i, q] = 1.0
        sel_t = Tensor(sel)
        tgt_boxes = np.stack([targets[t].box for _, t in match.pairs])
        pred_boxes = T.matmul(sel_t, outputs.boxes)
        box_l1 = T.mean_overaxis(T.sum_overaxis(
            T.l1(pred_boxes, Tensor(tgt_boxes)), 1), 0)
        ones_k = Tensor(np.ones((k, 1)))
        box_giou = T.mean_all(T.sub(ones_k, _giou_tensor(pred_boxes, tgt_boxes)))

        n_pix = outputs.mask_logits.shape[1] * outputs.mask_logits.shape[2]
        pred_masks = T.matmul(sel_t, T.reshape(outputs.mask_logits, (nq, n_pix)))
        tgt_masks = np.stack([targets[t].mask_feat.reshape(-1) for _, t in match.pairs])
        mask_bce = T.mean_all(T.bce_with_logits(pred_masks, Tensor(tgt_masks)))
        probs = T.sigmoid(pred_masks)
        ones_col = Tensor(np.ones((k,)))
        num = T.add(T.scale(T.sum_overaxis(T.mul(probs, Tensor(tgt_masks)), 1), 2.0), ones_col)
        den = T.add(T.add(T.sum_overaxis(probs, 1),
                          Tensor(tgt_masks.sum(axis=1))), ones_col)
        mask_dice = T.mean_all(T.sub(ones_col, T.div(num, den)))

    total = T.scale(cls, w["cls"])
    total = T.add(total, T.reshape(T.scale(box_l1, w["l1"]), total.shape))
    total = T.add(total, T.reshape(T.scale(box_giou, w["giou"]), total.shape))
    total = T.add(total, T.reshape(T.scale(mask_bce, w["mask"]), total.shape))
    total = T.add(total, T.reshape(T.scale(mask_dice, w["dice"]), total.shape))
    breakdown = LossBreakdown(
        total=total.item(), cls=cls.item(), box_l1=box_l1.item(),
        box_giou=box_giou.item(), mask_bce=mask_bce.item(),
        mask_dice=mask_dice.item())
    return total, breakdown


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model_cfg: ModelConfig
    params: Dict[str, Tensor]
    momentum: Dict[str, Tensor]
    step: int
    metrics: List[LossBreakdown]


class DivergenceError(RuntimeError):
    pass


def train(dataset: AnnotationSet, images: Dict[int, np.ndarray],
          train_cfg: TrainConfig, model_cfg: ModelConfig,
          checkpoint_path=None, metrics_path=None,
          resume_from=None) -> TrainResult:
    """SGD-with-momentum loop; fully deterministic given the seed."""
    if not dataset.images:
        raise ValueError("empty dataset")
    space = dataset.space
    table = build_combo_table(space)

    if resume_from is not None:
        model_cfg, params, state = load_checkpoint(resume_from)
        if state is None:
            raise ValueError("checkpoint has no training state to resume")
        momentum = state["momentum"]
        step = state["step"]
        data_seed = int(state["rng"]["seed"])
    else:
        params = init_params(model_cfg, seed=train_cfg.seed, space=space)
        momentum = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
        step = 0
        data_seed = train_cfg.seed

    per_image_targets = {
        im.id: targets_from_annotations(dataset, im.id, model_cfg.stride, table)
        for im in dataset.images}
    image_ids = [im.id for im in dataset.images]
    steps_per_epoch = math.ceil(len(image_ids) / train_cfg.batch_size)
    total_steps = (train_cfg.max_steps if train_cfg.max_steps is not None
                   else train_cfg.epochs * steps_per_epoch)

    def epoch_order(epoch: int) -> np.ndarray:
        # batch order is a pure function of (seed, epoch) so a resumed run
        # replays the exact same schedule from any step
        return np.random.default_rng((data_seed, epoch)).permutation(len(image_ids))

    def run_step(batch):
        with Tape() as tape:
            batch_total = None
            agg = np.zeros(6)
            for image_id in batch:
                outputs = forward(images[image_id], params, model_cfg,
                                  table=table, space=space)
                targets = per_image_targets[image_id]
                if targets:
                    cost = build_cost(outputs, targets, train_cfg.cost_weights)
                    match = hungarian_match(cost)
                else:
                    match = MatchResult(pairs=[], unmatched_queries=list(
                        range(model_cfg.num_queries)))
                total, bd = compute_loss(outputs, targets, match,
                                         train_cfg, table=table)
                agg += np.array([bd.total, bd.cls, bd.box_l1,
                                 bd.box_giou, bd.mask_bce, bd.mask_dice])
                batch_total = total if batch_total is None else T.add(
                    T.reshape(batch_total, total.shape), total)
            batch_total = T.scale(batch_total, 1.0 / len(batch))
            grads = backward(batch_total, tape, params=list(params.values()))
        return batch_total.item(), agg, grads

    metrics: List[LossBreakdown] = []
    log_file = open(metrics_path, "a") if metrics_path else None
    try:
        while step < total_steps:
            order = epoch_order(step // steps_per_epoch)
            b = step % steps_per_epoch
            batch = [image_ids[i] for i in
                     order[b * train_cfg.batch_size:(b + 1) * train_cfg.batch_size]]
            try:
                loss_val, agg, grads = run_step(batch)
            except T.NumericError as e:
                raise DivergenceError(
                    f"training diverged at step {step + 1}: {e}") from e
            if not np.isfinite(loss_val):
                raise DivergenceError(f"non-finite loss at step {step + 1}")
            if train_cfg.grad_clip is not None:
                norm = math.sqrt(sum(float(np.sum(grads[p.tid].data ** 2))
                                     for p in params.values()))
                if norm > train_cfg.grad_clip:
                    scale_f = train_cfg.grad_clip / norm
                    for p in params.values():
                        grads[p.tid].data *= scale_f
            for name, p in params.items():
                g = grads[p.tid].data
                momentum[name].data = (train_cfg.momentum * momentum[name].data + g)
                p.data = p.data - train_cfg.learning_rate * momentum[name].data
            step += 1
            bd = LossBreakdown(*(agg / len(batch)))
            metrics.append(bd)
            if log_file:
                log_file.write(bd.to_json(step) + "\n")
            if (checkpoint_path and train_cfg.checkpoint_every
                    and step % train_cfg.checkpoint_every == 0):
                save_checkpoint(checkpoint_path, model_cfg, params,
                                train_state={"momentum": momentum, "step": step,
                                             "rng": {"seed": data_seed}})
    finally:
        if log_file:
            log_file.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model_cfg, params,
                        train_state={"momentum": momentum, "step": step,
                                     "rng": {"seed": data_seed}})
    return TrainResult(model_cfg=model_cfg, params=params, momentum=momentum,
                       step=step, metrics=metrics)
