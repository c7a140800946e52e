"""Detection metrics: per-class AP and vehicle-length-binned AP.

Matching is greedy in score order against unmatched ground truth at a 3D IoU
threshold; precision is integrated over a 101-point interpolated envelope.
The length breakdown pools the vehicle-like classes and, per bin, treats
ground truth outside the bin as ignore regions: detections landing on them
are dropped rather than counted as false positives, the usual size-breakdown
convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo

VEHICLE_LIKE = (0, 1)  # vehicle, large_vehicle


@dataclass
class PRCurve:
    recall: np.ndarray     # cumulative recall per detection, score-ordered
    precision: np.ndarray  # cumulative precision per detection
    ap: float | None


@dataclass
class EvalReport:
    iou_threshold: float
    per_class_ap: dict
    mean_ap: float | None
    length_bins: list
    length_bin_ap: dict
    pr_curves: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "per_class_ap": {str(k): v for k, v in self.per_class_ap.items()},
            "mean_ap": self.mean_ap,
            "length_bins": list(self.length_bins),
            "length_bin_ap": dict(self.length_bin_ap),
        }


def _interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """Mean of the precision envelope sampled at recalls 0, 0.01, ..., 1."""
    if recall.size == 0:
        return 0.0
    grid = np.linspace(0.0, 1.0, 101)
    # envelope: best precision among points achieving at least this recall
    order = np.argsort(recall, kind="stable")
    r = recall[order]
    p = precision[order]
    env = np.maximum.accumulate(p[::-1])[::-1]
    idx = np.searchsorted(r, grid, side="left")
    vals = np.where(idx < r.size, env[np.minimum(idx, r.size - 1)], 0.0)
    return float(vals.mean())


def _greedy_match(dets, gts, iou_threshold):
    """dets: list of (score, scene, box); gts: dict scene -> list of boxes.

    Returns (tp flags, fp flags, n_gt) after score-ordered greedy matching.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], dets[i][1], i))
    matched: dict = {s: np.zeros(len(b), dtype=bool) for s, b in gts.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for i in order:
        _, scene, box = dets[i]
        cand = gts.get(scene, [])
        best_iou, best_j = 0.0, -1
        for j, gt_box in enumerate(cand):
            if matched[scene][j]:
                continue
            v = geo.iou_3d(box, gt_box)
            if v >= iou_threshold and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[scene][best_j] = True
            tp[i] = True
    n_gt = sum(len(b) for b in gts.values())
    return tp, ~tp, n_gt


def _pr_from_matches(dets, tp, fp, n_gt) -> PRCurve:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], dets[i][1], i))
    tp_sorted = tp[order]
    fp_sorted = fp[order]
    cum_tp = np.cumsum(tp_sorted)
    cum_fp = np.cumsum(fp_sorted)
    recall = cum_tp / max(n_gt, 1)
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
    ap = _interpolated_ap(recall, precision) if n_gt > 0 else None
    return PRCurve(recall=recall, precision=precision, ap=ap)


def evaluate(detections_per_scene, gt_per_scene, iou_threshold: float = 0.5,
             length_bins=(0.0, 4.0, 8.0, 12.0), vehicle_classes=VEHICLE_LIKE) -> EvalReport:
    """Score detections against ground truth.

    Args:
        detections_per_scene: list of Detections-like (boxes, scores, classes).
        gt_per_scene: list of (gt_boxes, gt_classes) in the same order.
        iou_threshold: 3D IoU needed to match.
        length_bins: ascending lower edges of the vehicle-length bins; the
            last bin is open-ended.
    """
    classes = set()
    for boxes, cls in gt_per_scene:
        classes.update(np.asarray(cls, dtype=np.int64).tolist())
    for det in detections_per_scene:
        classes.update(np.asarray(det.classes, dtype=np.int64).tolist())

    per_class_ap = {}
    pr_curves = {}
    for c in sorted(classes):
        dets = []
        gts = {}
        for scene, (det, (gt_boxes, gt_classes)) in enumerate(
            zip(detections_per_scene, gt_per_scene)
        ):
            for k in np.nonzero(np.asarray(det.classes) == c)[0]:
                dets.append((float(det.scores[k]), scene, det.boxes[k]))
            rows = np.nonzero(np.asarray(gt_classes) == c)[0]
            if rows.size:
                gts[scene] = [np.asarray(gt_boxes)[j] for j in rows]
        if not gts and not dets:
            per_class_ap[c] = None
            continue
        if not gts:
            per_class_ap[c] = None  # recall undefined without ground truth
            continue
        tp, fp, n_gt = _greedy_match(dets, gts, iou_threshold)
        curve = _pr_from_matches(dets, tp, fp, n_gt)
        per_class_ap[c] = curve.ap
        pr_curves[f"class_{c}"] = curve

    defined = [v for v in per_class_ap.values() if v is not None]
    mean_ap = float(np.mean(defined)) if defined else None

    length_bin_ap = _length_bin_ap(detections_per_scene, gt_per_scene, iou_threshold,
                                   length_bins, vehicle_classes, pr_curves)

    return EvalReport(
        iou_threshold=iou_threshold,
        per_class_ap=per_class_ap,
        mean_ap=mean_ap,
        length_bins=list(length_bins),
        length_bin_ap=length_bin_ap,
        pr_curves=pr_curves,
    )


def bin_label(lo: float, hi: float | None) -> str:
    return f"[{lo:g},{hi:g})" if hi is not None else f"[{lo:g},inf)"


def _length_bin_ap(detections_per_scene, gt_per_scene, iou_threshold, length_bins,
                   vehicle_classes, pr_curves) -> dict:
    edges = list(length_bins) + [None]
    out = {}
    vset = set(vehicle_classes)

    all_dets = []
    gt_by_scene = {}
    for scene, (det, (gt_boxes, gt_classes)) in enumerate(
        zip(detections_per_scene, gt_per_scene)
    ):
        for k in np.nonzero(np.isin(np.asarray(det.classes), list(vset)))[0]:
            all_dets.append((float(det.scores[k]), scene, det.boxes[k]))
        rows = np.nonzero(np.isin(np.asarray(gt_classes), list(vset)))[0]
        if rows.size:
            gt_by_scene[scene] = np.asarray(gt_boxes)[rows]

    for b in range(len(edges) - 1):
        lo, hi = edges[b], edges[b + 1]
        label = bin_label(lo, hi)
        active = {}
        ignore = {}
        n_active = 0
        for scene, boxes in gt_by_scene.items():
            lengths = boxes[:, 3]
            in_bin = (lengths >= lo) & (lengths < hi if hi is not None else np.ones_like(lengths, bool))
            active[scene] = [boxes[j] for j in np.nonzero(in_bin)[0]]
            ignore[scene] = [boxes[j] for j in np.nonzero(~in_bin)[0]]
            n_active += int(in_bin.sum())
        if n_active == 0:
            out[label] = None
            continue

        order = sorted(range(len(all_dets)), key=lambda i: (-all_dets[i][0], all_dets[i][1], i))
        matched = {s: np.zeros(len(b_), dtype=bool) for s, b_ in active.items()}
        tp_list, fp_list, score_list = [], [], []
        for i in order:
            score, scene, box = all_dets[i]
            best_iou, best_j = 0.0, -1
            for j, gt_box in enumerate(active.get(scene, [])):
                if matched[scene][j]:
                    continue
                v = geo.iou_3d(box, gt_box)
                if v >= iou_threshold and v > best_iou:
                    best_iou, best_j = v, j
            if best_j >= 0:
                matched[scene][best_j] = True
                tp_list.append(True)
                fp_list.append(False)
                score_list.append(score)
                continue
            # landed on an out-of-bin vehicle: ignore rather than penalize
            on_ignore = any(
                geo.iou_3d(box, ig) >= iou_threshold for ig in ignore.get(scene, [])
            )
            if not on_ignore:
                tp_list.append(False)
                fp_list.append(True)
                score_list.append(score)

        cum_tp = np.cumsum(np.asarray(tp_list, dtype=np.int64))
        cum_fp = np.cumsum(np.asarray(fp_list, dtype=np.int64))
        recall = cum_tp / n_active
        precision = cum_tp / np.maximum(cum_tp + cum_fp, 1)
        out[label] = _interpolated_ap(recall, precision)
        pr_curves[f"length_{label}"] = PRCurve(recall=recall, precision=precision, ap=out[label])
    return out


def pr_curves_csv(report: EvalReport) -> str:
    """PR curves as CSV text for external plotting."""
    lines = ["curve,rank,recall,precision"]
    for name, curve in report.pr_curves.items():
        for i, (r, p) in enumerate(zip(curve.recall, curve.precision)):
            lines.append(f"{name},{i},{r:.6f},{p:.6f}")
    return "\n".join(lines) + "\n"
