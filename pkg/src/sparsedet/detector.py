"""End-to-end wiring of the fully sparse detection pipeline.

Forward order: voxelize, encode per-point features, vote class + center,
cluster voted centers into groups, extract group features and emit one
proposal per group, re-group points by proposal membership, refine.

The discrete decisions along the way (group ids, proposal boxes used by the
second stage, corrected membership) can be captured in a
``PipelineStructure`` and replayed, keeping the loss a smooth function of
the parameters.  That is what finite-difference gradient checks and the
training loop's target assignment rely on; the box decode itself never
enters the tape, so no gradient flows from the second stage back into the
first stage's regression output (the standard two-stage cut).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder
from . import geometry as geo
from . import grouping as grp_mod
from . import instance_net as inet
from . import nn
from .config import ModelConfig
from .grouping import Grouping, VoteResult
from .segment_ops import NONE_ID
from .synth import NUM_CLASSES, PointCloud


@dataclass
class PipelineStructure:
    """Frozen discrete skeleton of one forward pass."""
    grouping: Grouping
    kept: np.ndarray     # group ids surviving proposal dedup, ascending
    boxes: np.ndarray    # (M2, 7) proposal boxes the second stage saw
    scores: np.ndarray   # (M2,)
    classes: np.ndarray  # (M2,)
    corrected: Grouping


@dataclass
class ForwardState:
    tp: nn.TapeParams
    grid: encoder.SparseVoxelGrid
    point_features: ad.Tensor
    votes: VoteResult
    structure: PipelineStructure
    prediction: inet.SparsePrediction | None
    refined: inet.RefineOutput | None
    participant_rows: np.ndarray


@dataclass
class Detections:
    boxes: np.ndarray    # (K, 7)
    scores: np.ndarray   # (K,)
    classes: np.ndarray  # (K,)

    @staticmethod
    def empty() -> "Detections":
        return Detections(np.zeros((0, 7)), np.zeros(0), np.zeros(0, dtype=np.int64))


def init_model(cfg: ModelConfig, seed: int, dtype=np.float64,
               num_classes: int = NUM_CLASSES) -> nn.ParamStore:
    rng = np.random.default_rng(seed)
    store = nn.ParamStore(dtype)
    c = cfg.encoder_channels
    encoder.init_params(store, rng, cfg.point_in_channels, cfg.encoder_vfe_hidden, c)
    grp_mod.init_vote_params(store, rng, c, cfg.vote_hidden, num_classes)
    inet.init_stack_params(store, "sir", cfg.sir_layers, c, cfg.sir_channels, rng)
    inet.init_predict_params(store, rng, cfg.sir_layers, cfg.sir_channels,
                             cfg.head_hidden, num_classes)
    inet.init_refine_params(store, rng, cfg.sir2_layers, c, cfg.sir2_channels,
                            cfg.head_hidden)
    return store


def _empty_grouping(n: int) -> Grouping:
    return Grouping(
        ids=np.full(n, NONE_ID, dtype=np.int64), num_groups=0,
        centers=np.zeros((0, 3)), group_class=np.zeros(0, dtype=np.int64),
    )


def forward(store: nn.ParamStore, cfg: ModelConfig, pc: PointCloud,
            frozen: PipelineStructure | None = None) -> ForwardState:
    coords = pc.coords
    n = coords.shape[0]
    tp = nn.TapeParams(store)
    grid = encoder.voxelize(coords, cfg.voxel_size)
    feats = encoder.encode(grid, coords, pc.intensity, tp, rounds=cfg.encoder_rounds)
    votes = grp_mod.vote(feats, coords, tp)

    grouping = frozen.grouping if frozen is not None else grp_mod.ccl_group(
        votes, cfg.group_radius, cfg.fg_threshold
    )
    m = grouping.num_groups
    if m == 0:
        structure = frozen if frozen is not None else PipelineStructure(
            grouping=grouping, kept=np.zeros(0, dtype=np.int64), boxes=np.zeros((0, 7)),
            scores=np.zeros(0), classes=np.zeros(0, dtype=np.int64),
            corrected=_empty_grouping(n),
        )
        return ForwardState(
            tp=tp, grid=grid, point_features=feats, votes=votes, structure=structure,
            prediction=None, refined=None, participant_rows=np.zeros(0, dtype=np.int64),
        )

    rows = np.nonzero(grouping.ids != NONE_ID)[0]
    ids_sel = grouping.ids[rows]
    voted_sel = ad.take_rows(votes.voted_centers, rows)
    centers = ad.segment_broadcast(ad.segment_pool(voted_sel, ids_sel, m, "avg"), ids_sel)
    rel = inet.center_relative(coords[rows], centers, store.dtype)
    _, group_feats = inet.run_stack(
        tp, "sir", cfg.sir_layers, ad.take_rows(feats, rows), rel, ids_sel, m
    )
    prediction = inet.sparse_predict(tp, group_feats, grouping)

    if frozen is not None:
        # replay the recorded skeleton: the second stage must see the exact
        # proposals of the base pass, not ones drifting with the parameters
        kept = frozen.kept
        second = inet.SparsePrediction(
            boxes=frozen.boxes.copy(), scores=frozen.scores.copy(),
            classes=frozen.classes.copy(), group_centers=prediction.group_centers[kept],
            cls_logits=ad.take_rows(prediction.cls_logits, kept),
            reg=ad.take_rows(prediction.reg, kept),
        )
        corrected = frozen.corrected
        structure = frozen
    else:
        # duplicate proposals (several groups on one instance) steal points
        # from each other during correction; dedup so each corrected group
        # sees the instance's full extent
        kept_list: list[int] = []
        for c in np.unique(prediction.classes):
            rows_c = np.nonzero(prediction.classes == c)[0]
            sel = geo.nms_bev(prediction.boxes[rows_c], prediction.scores[rows_c],
                              cfg.proposal_nms_iou)
            kept_list.extend(rows_c[sel].tolist())
        kept = np.asarray(sorted(kept_list), dtype=np.int64)
        second = inet.SparsePrediction(
            boxes=prediction.boxes[kept], scores=prediction.scores[kept],
            classes=prediction.classes[kept], group_centers=prediction.group_centers[kept],
            cls_logits=ad.take_rows(prediction.cls_logits, kept),
            reg=ad.take_rows(prediction.reg, kept),
        )
        corrected = inet.group_correct(second, coords)
        structure = PipelineStructure(
            grouping=grouping, kept=kept, boxes=second.boxes.copy(),
            scores=second.scores.copy(), classes=second.classes.copy(),
            corrected=corrected,
        )

    refined = inet.refine(tp, corrected, coords, feats, second, cfg.sir2_layers)
    return ForwardState(
        tp=tp, grid=grid, point_features=feats, votes=votes, structure=structure,
        prediction=prediction, refined=refined, participant_rows=rows,
    )


def detect(store: nn.ParamStore, cfg: ModelConfig, pc: PointCloud) -> Detections:
    """Inference: forward pass, confidence filter, per-class rotated NMS."""
    with ad.no_grad():
        state = forward(store, cfg, pc)
    if state.refined is None:
        return Detections.empty()
    boxes = state.refined.boxes
    scores = state.refined.scores
    classes = state.refined.classes
    # a box containing no points is never evidence of an object
    from .segment_ops import group_sizes

    members = group_sizes(state.structure.corrected.ids, boxes.shape[0])
    keep = (scores >= cfg.score_threshold) & (members > 0)
    boxes, scores, classes = boxes[keep], scores[keep], classes[keep]

    kept: list[int] = []
    for c in np.unique(classes):
        rows = np.nonzero(classes == c)[0]
        sel = geo.nms_bev(boxes[rows], scores[rows], cfg.nms_iou)
        kept.extend(rows[sel].tolist())
    kept_arr = np.asarray(sorted(kept, key=lambda i: -scores[i]), dtype=np.int64)
    return Detections(boxes=boxes[kept_arr], scores=scores[kept_arr], classes=classes[kept_arr])
