"""Oriented 3D box math: containment, rotated IoU, regression encodings.

Boxes are 7-vectors ``(cx, cy, cz, l, w, h, yaw)`` in meters/radians.  Length
runs along the heading (yaw) direction, width across it, height up; yaw is
normalized to (-pi, pi].  Arrays of boxes have shape (M, 7).

BEV intersection is computed exactly with Sutherland-Hodgman clipping of the
two corner quads, because the resulting IoU feeds training labels and must
not carry grid-approximation noise.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError

# Field offsets within a box 7-vector.
CX, CY, CZ, L, W, H, YAW = range(7)


def normalize_yaw(yaw):
    """Wrap angles to (-pi, pi]."""
    y = np.arctan2(np.sin(yaw), np.cos(yaw))
    return np.where(np.isclose(y, -np.pi), np.pi, y) if np.ndim(y) else (
        np.pi if np.isclose(y, -np.pi) else float(y)
    )


def make_box(cx, cy, cz, l, w, h, yaw) -> np.ndarray:
    if min(l, w, h) <= 0:
        raise ContractViolationError(f"box dimensions must be positive, got {(l, w, h)}")
    return np.array([cx, cy, cz, l, w, h, normalize_yaw(yaw)], dtype=np.float64)


def to_canonical_frame(points, box) -> np.ndarray:
    """Express points in the box frame: origin at center, x along heading."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64)) - box[:3]
    c, s = np.cos(-box[YAW]), np.sin(-box[YAW])
    out = np.empty_like(p)
    out[:, 0] = c * p[:, 0] - s * p[:, 1]
    out[:, 1] = s * p[:, 0] + c * p[:, 1]
    out[:, 2] = p[:, 2]
    return out


def points_in_box(points, box) -> np.ndarray:
    """Containment mask for an array of points; faces count as inside."""
    q = np.abs(to_canonical_frame(points, box))
    half = np.asarray(box[3:6], dtype=np.float64) / 2.0
    eps = 1e-12
    return np.all(q <= half + eps, axis=1)


def point_in_box(point, box) -> bool:
    return bool(points_in_box(np.asarray(point)[None, :], box)[0])


def box_corners_bev(box) -> np.ndarray:
    """The four BEV corners, counterclockwise."""
    dx = np.array([1.0, -1.0, -1.0, 1.0]) * box[L] / 2.0
    dy = np.array([1.0, 1.0, -1.0, -1.0]) * box[W] / 2.0
    c, s = np.cos(box[YAW]), np.sin(box[YAW])
    return np.stack([box[CX] + c * dx - s * dy, box[CY] + s * dx + c * dy], axis=1)


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman: clip a polygon against a convex CCW polygon."""
    output = list(subject)
    n = len(clip)
    for k in range(n):
        a = clip[k]
        b = clip[(k + 1) % n]
        if not output:
            return []
        edge = (b[0] - a[0], b[1] - a[1])

        def inside(p):
            return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= -1e-12

        def intersect(p, q):
            dp = (q[0] - p[0], q[1] - p[1])
            denom = edge[0] * dp[1] - edge[1] * dp[0]
            if abs(denom) < 1e-30:
                return q
            t = (edge[0] * (a[1] - p[1]) - edge[1] * (a[0] - p[0])) / denom
            return (p[0] + t * dp[0], p[1] + t * dp[1])

        current = output
        output = []
        s = current[-1]
        for e in current:
            if inside(e):
                if not inside(s):
                    output.append(intersect(s, e))
                output.append(e)
            elif inside(s):
                output.append(intersect(s, e))
            s = e
    return output


def intersection_area_bev(box_a, box_b) -> float:
    pa = [tuple(r) for r in box_corners_bev(box_a)]
    pb = [tuple(r) for r in box_corners_bev(box_b)]
    return _polygon_area(_clip_polygon(pa, pb))


def _bev_disjoint(box_a, box_b) -> bool:
    # circumradius screen: centers farther apart than the two circumradii
    # cannot intersect, skipping the polygon clip for most pairs
    gap = np.hypot(box_a[CX] - box_b[CX], box_a[CY] - box_b[CY])
    return gap > (np.hypot(box_a[L], box_a[W]) + np.hypot(box_b[L], box_b[W])) / 2.0


def iou_bev(box_a, box_b) -> float:
    """Rotated-rectangle IoU in bird's-eye view, in [0, 1]."""
    area_a = box_a[L] * box_a[W]
    area_b = box_b[L] * box_b[W]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    if _bev_disjoint(box_a, box_b):
        return 0.0
    inter = intersection_area_bev(box_a, box_b)
    union = area_a + area_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_3d(box_a, box_b) -> float:
    """Volumetric IoU: BEV intersection times vertical overlap, over union."""
    vol_a = box_a[L] * box_a[W] * box_a[H]
    vol_b = box_b[L] * box_b[W] * box_b[H]
    if vol_a <= 0 or vol_b <= 0:
        return 0.0
    z_lo = max(box_a[CZ] - box_a[H] / 2, box_b[CZ] - box_b[H] / 2)
    z_hi = min(box_a[CZ] + box_a[H] / 2, box_b[CZ] + box_b[H] / 2)
    dz = max(0.0, z_hi - z_lo)
    if dz == 0.0 or _bev_disjoint(box_a, box_b):
        return 0.0
    inter = intersection_area_bev(box_a, box_b) * dz
    union = vol_a + vol_b - inter
    if union <= 0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def boundary_offsets(points, box) -> np.ndarray:
    """Signed distances from points to the six faces, in the box frame.

    Order: (+x, -x, +y, -y, +z, -z) faces.  All six are non-negative iff the
    point is inside; outside points yield negative entries, which callers may
    rely on as an "outside" signal.
    """
    q = to_canonical_frame(points, box)
    half = np.asarray(box[3:6], dtype=np.float64) / 2.0
    return np.stack(
        [
            half[0] - q[:, 0], half[0] + q[:, 0],
            half[1] - q[:, 1], half[1] + q[:, 1],
            half[2] - q[:, 2], half[2] + q[:, 2],
        ],
        axis=1,
    )


def box_encode(box, anchor_point) -> np.ndarray:
    """Regression target for a box relative to an anchor point.

    Layout: (dx, dy, dz, log l, log w, log h, sin yaw, cos yaw).  The sin/cos
    pair sidesteps the +-pi wraparound that plain-angle L1 regression hits.
    """
    box = np.asarray(box, dtype=np.float64)
    if np.any(box[3:6] <= 0):
        raise ContractViolationError(f"cannot encode non-positive dimensions {box[3:6]}")
    a = np.asarray(anchor_point, dtype=np.float64)
    return np.concatenate(
        [box[:3] - a, np.log(box[3:6]), [np.sin(box[YAW]), np.cos(box[YAW])]]
    )


def box_decode(target, anchor_point) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    a = np.asarray(anchor_point, dtype=np.float64)
    out = np.empty(7, dtype=np.float64)
    out[:3] = a + t[:3]
    out[3:6] = np.exp(t[3:6])
    out[YAW] = np.arctan2(t[6], t[7])
    if np.isclose(out[YAW], -np.pi):
        out[YAW] = np.pi
    return out


def nms_bev(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy rotated-BEV non-maximum suppression; returns kept indices."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    for idx in order:
        if all(iou_bev(boxes[idx], boxes[k]) <= iou_threshold for k in keep):
            keep.append(int(idx))
    return np.array(keep, dtype=np.int64)
