"""Instance-level recognition: per-group feature extraction and prediction.

Given a grouping of points into instances, a stack of two-step layers builds
point features that mix each point with its whole group:

    step 1:  a = LinNormAct(CAT(f, x - group_center[ids]))
    step 2:  f' = LinNormAct(CAT(a, maxpool(a)[ids]))

The max-pooled output of step 1 of every layer is that layer's group
feature; concatenating them across the stack gives the feature one box and
class prediction is made from, exactly one per group no matter how many
points the group holds.

A second stage re-groups points by proposal-box membership (highest score
wins), feeds the member points' features plus their six boundary offsets
through a deeper stack, and predicts a residual correction plus an
IoU-calibrated confidence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import nn
from .errors import ContractViolationError
from .grouping import Grouping
from .segment_ops import NONE_ID

# log-size outputs are clamped before exponentiation so that an untrained
# head cannot emit kilometer-sized boxes
LOG_DIM_CLIP = 4.0


def soft_iou_label(iou):
    """Confidence target min(1, max(0, 2*IoU - 0.5))."""
    return np.clip(2.0 * np.asarray(iou, dtype=np.float64) - 0.5, 0.0, 1.0)


@dataclass
class Proposal:
    box: np.ndarray           # (7,)
    class_logits: np.ndarray  # (num_classes + 1,)
    group_id: int
    score: float


@dataclass
class SparsePrediction:
    boxes: np.ndarray          # (M, 7) decoded proposal boxes
    scores: np.ndarray         # (M,) max foreground probability
    classes: np.ndarray        # (M,) argmax foreground class
    group_centers: np.ndarray  # (M, 3) regression anchors
    cls_logits: ad.Tensor      # (M, num_classes + 1)
    reg: ad.Tensor             # (M, 8) encode-space outputs

    def to_list(self) -> list[Proposal]:
        return [
            Proposal(
                box=self.boxes[k],
                class_logits=np.asarray(self.cls_logits.data[k]),
                group_id=k,
                score=float(self.scores[k]),
            )
            for k in range(self.boxes.shape[0])
        ]


@dataclass
class RefineOutput:
    boxes: np.ndarray      # (M, 7) proposal + residual, decoded
    scores: np.ndarray     # (M,) sigmoid(confidence)
    classes: np.ndarray    # (M,) inherited from proposals
    residual: ad.Tensor    # (M, 8)
    confidence: ad.Tensor  # (M, 1)


# ---------------------------------------------------------------------------
# layer stacks


def init_stack_params(store: nn.ParamStore, prefix: str, num_layers: int,
                      c_in: int, channels: int, rng) -> None:
    for l in range(num_layers):
        cin = c_in if l == 0 else channels
        nn.add_lin_norm_act(store, f"{prefix}.l{l}.a", cin + 3, channels, rng)
        nn.add_lin_norm_act(store, f"{prefix}.l{l}.b", 2 * channels, channels, rng)


def run_stack(tp: nn.TapeParams, prefix: str, num_layers: int, feats: ad.Tensor,
              rel: ad.Tensor, group_ids, num_groups: int) -> tuple[ad.Tensor, list[ad.Tensor]]:
    """Apply the two-step layers; returns final point features and per-layer
    group features."""
    if rel.data.shape != (feats.data.shape[0], 3):
        raise ContractViolationError("rel must be one 3-vector per feature row")
    group_feats = []
    f = feats
    for l in range(num_layers):
        a = nn.lin_norm_act(tp, f"{prefix}.l{l}.a", ad.concat([f, rel], axis=1))
        pooled = ad.segment_pool(a, group_ids, num_groups, "max")
        f = nn.lin_norm_act(
            tp, f"{prefix}.l{l}.b", ad.concat([a, ad.segment_broadcast(pooled, group_ids)], axis=1)
        )
        group_feats.append(pooled)
    return f, group_feats


def center_relative(coords, centers_broadcast: ad.Tensor, dtype) -> ad.Tensor:
    """x - center[ids], with the center possibly tape-connected."""
    return ad.sub(ad.const(np.asarray(coords, dtype=np.float64), dtype=dtype), centers_broadcast)


# ---------------------------------------------------------------------------
# first stage: one prediction per group


def init_predict_params(store: nn.ParamStore, rng, num_layers: int, channels: int,
                        head_hidden: int, num_classes: int) -> None:
    feat_dim = num_layers * channels
    nn.add_mlp_head(store, "pred.cls", feat_dim, head_hidden, num_classes + 1, rng)
    # regression outputs span meters; a near-zero start takes the L1
    # optimizer too many constant-size steps to escape
    nn.add_mlp_head(store, "pred.reg", feat_dim, head_hidden, 8, rng, out_w_std=0.1)


def _decode_clipped(target: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64).copy()
    t[3:6] = np.clip(t[3:6], -LOG_DIM_CLIP, LOG_DIM_CLIP)
    return geo.box_decode(t, anchor)


def sparse_predict(tp: nn.TapeParams, group_feats: list[ad.Tensor],
                   grouping: Grouping) -> SparsePrediction:
    """One box and one class distribution per group."""
    feat = ad.concat(group_feats, axis=1)
    cls_logits = nn.mlp_head(tp, "pred.cls", feat)
    reg = nn.mlp_head(tp, "pred.reg", feat)

    m = grouping.num_groups
    num_classes = cls_logits.data.shape[1] - 1
    boxes = np.zeros((m, 7), dtype=np.float64)
    for k in range(m):
        boxes[k] = _decode_clipped(reg.data[k], grouping.centers[k])

    z = cls_logits.data - cls_logits.data.max(axis=1, keepdims=True) if m else cls_logits.data
    probs = np.exp(z)
    probs = probs / probs.sum(axis=1, keepdims=True) if m else probs
    fg = probs[:, :num_classes] if m else np.zeros((0, num_classes))
    classes = fg.argmax(axis=1) if m else np.zeros(0, dtype=np.int64)
    scores = fg.max(axis=1) if m else np.zeros(0)

    return SparsePrediction(
        boxes=boxes,
        scores=np.asarray(scores, dtype=np.float64),
        classes=np.asarray(classes, dtype=np.int64),
        group_centers=grouping.centers.copy(),
        cls_logits=cls_logits,
        reg=reg,
    )


# ---------------------------------------------------------------------------
# group correction and second stage


def group_correct(prediction: SparsePrediction, coords) -> Grouping:
    """Re-assign every point to the highest-scoring proposal box containing it.

    Points inside no proposal get NONE_ID.  Ties on score break toward the
    lower group id.  Group k of the result corresponds to proposal k; groups
    may come back empty.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    n = coords.shape[0]
    m = prediction.boxes.shape[0]
    ids = np.full(n, NONE_ID, dtype=np.int64)
    order = np.lexsort((np.arange(m), -prediction.scores))
    unassigned = np.ones(n, dtype=bool)
    for k in order:
        inside = geo.points_in_box(coords, prediction.boxes[k]) & unassigned
        ids[inside] = k
        unassigned &= ~inside
    return Grouping(
        ids=ids,
        num_groups=m,
        centers=prediction.boxes[:, :3].copy(),
        group_class=prediction.classes.copy(),
    )


def init_refine_params(store: nn.ParamStore, rng, num_layers: int, c_in: int,
                       channels: int, head_hidden: int) -> None:
    init_stack_params(store, "ref", num_layers, c_in + 6, channels, rng)
    feat_dim = num_layers * channels
    nn.add_mlp_head(store, "ref.res", feat_dim, head_hidden, 8, rng, out_w_std=0.1)
    nn.add_mlp_head(store, "ref.conf", feat_dim, head_hidden, 1, rng)


def refine(tp: nn.TapeParams, corrected: Grouping, coords, point_features: ad.Tensor,
           prediction: SparsePrediction, num_layers: int) -> RefineOutput:
    """Residual box correction and confidence for every corrected group.

    Member points carry their encoder features plus signed offsets to the six
    proposal faces.  All second-stage coordinates live in the proposal's
    canonical frame (origin at its center, x along its heading), so "the
    points end short of my rear face, shift backwards" looks the same no
    matter how the box is oriented in the world.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    dtype = tp.store.dtype
    m = corrected.num_groups
    sel = np.nonzero(corrected.ids != NONE_ID)[0]
    ids_sel = corrected.ids[sel]

    offs = np.zeros((sel.shape[0], 6), dtype=np.float64)
    rel_arr = np.zeros((sel.shape[0], 3), dtype=np.float64)
    for k in range(m):
        rows = ids_sel == k
        if rows.any():
            offs[rows] = geo.boundary_offsets(coords[sel][rows], prediction.boxes[k])
            rel_arr[rows] = geo.to_canonical_frame(coords[sel][rows], prediction.boxes[k])

    feats = ad.concat([ad.take_rows(point_features, sel), ad.const(offs, dtype=dtype)], axis=1)
    rel = ad.const(rel_arr, dtype=dtype)
    _, group_feats = run_stack(tp, "ref", num_layers, feats, rel, ids_sel, m)

    feat = ad.concat(group_feats, axis=1)
    residual = nn.mlp_head(tp, "ref.res", feat)
    confidence = nn.mlp_head(tp, "ref.conf", feat)

    boxes = np.zeros((m, 7), dtype=np.float64)
    for k in range(m):
        boxes[k] = apply_residual(prediction.boxes[k], residual.data[k])
    scores = 1.0 / (1.0 + np.exp(-confidence.data[:, 0].astype(np.float64)))

    return RefineOutput(
        boxes=boxes,
        scores=scores,
        classes=prediction.classes.copy(),
        residual=residual,
        confidence=confidence,
    )


def residual_target(proposal_box, gt_box) -> np.ndarray:
    """Proposal-frame residual: what the refinement head should predict.

    Layout mirrors the box encoding: center shift (rotated into the proposal
    frame), log dimension ratios, then (sin, cos-1) of the yaw difference.
    All entries are zero exactly when the proposal equals the ground truth.
    """
    prop = np.asarray(proposal_box, dtype=np.float64)
    gt = np.asarray(gt_box, dtype=np.float64)
    shift = geo.to_canonical_frame(gt[None, :3], prop)[0]
    dyaw = gt[geo.YAW] - prop[geo.YAW]
    return np.concatenate(
        [shift, np.log(gt[3:6] / prop[3:6]), [np.sin(dyaw), np.cos(dyaw) - 1.0]]
    )


def apply_residual(proposal_box, residual) -> np.ndarray:
    """Inverse of :func:`residual_target`; zero residual returns the proposal."""
    prop = np.asarray(proposal_box, dtype=np.float64)
    t = np.asarray(residual, dtype=np.float64)
    c, s = np.cos(prop[geo.YAW]), np.sin(prop[geo.YAW])
    out = np.empty(7, dtype=np.float64)
    out[0] = prop[0] + c * t[0] - s * t[1]
    out[1] = prop[1] + s * t[0] + c * t[1]
    out[2] = prop[2] + t[2]
    out[3:6] = prop[3:6] * np.exp(np.clip(t[3:6], -2.0, 2.0))
    yaw = prop[geo.YAW] + np.arctan2(t[6], t[7] + 1.0)
    out[geo.YAW] = geo.normalize_yaw(yaw)
    return out
