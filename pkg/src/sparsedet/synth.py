"""Synthetic LiDAR-like scenes with exact ground truth, plus scene file I/O.

Boxes rest on a flat ground plane and get surface points only on the faces a
sensor at the origin can see, with per-object counts falling off as
1/distance^2 under a fixed total point budget.  Large vehicles therefore
have no returns anywhere near their geometric center, which is the regime
the sparse pipeline exists for.

Scene files are little-endian binary (magic ``FSDS``): header, then packed
point records (x, y, z, intensity as f32) and box records (7 x f32 + u16
class id).  The layout is bit-exact so identical seeds produce identical
files on any platform.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import geometry as geo
from .errors import ContractViolationError, DataError

log = logging.getLogger(__name__)

MAGIC = b"FSDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIfQ")  # magic, version, n_points, n_boxes, flags, range, seed
_BOX = struct.Struct("<7fH")

CLASSES = ("vehicle", "large_vehicle", "pedestrian", "cyclist")
NUM_CLASSES = len(CLASSES)

# (length, width, height) sampling ranges per class, meters
SIZE_RANGES = {
    0: ((3.8, 5.6), (1.7, 2.1), (1.4, 1.8)),    # vehicle
    1: ((8.0, 20.0), (2.4, 3.0), (2.8, 4.0)),   # large_vehicle
    2: ((0.5, 0.9), (0.5, 0.9), (1.5, 1.9)),    # pedestrian
    3: ((1.5, 2.0), (0.5, 0.8), (1.5, 1.9)),    # cyclist
}

SENSOR_HEIGHT = 1.8


@dataclass
class PointCloud:
    coords: np.ndarray                 # (N, 3) float64
    intensity: np.ndarray | None = None  # (N,) float64

    @property
    def n(self) -> int:
        return int(self.coords.shape[0])


@dataclass
class Scene:
    pc: PointCloud
    gt_boxes: np.ndarray    # (B, 7)
    gt_classes: np.ndarray  # (B,) int
    range_m: float
    seed: int


@dataclass
class SceneSpec:
    range_m: float = 48.0
    point_budget: int = 2000
    boxes_min: int = 3
    boxes_max: int = 7
    class_mix: tuple = (0.45, 0.15, 0.2, 0.2)
    clutter_fraction: float = 0.25
    min_object_distance: float = 6.0
    placement_retries: int = 40
    face_jitter: float = 0.02
    classes: tuple = field(default=tuple(range(NUM_CLASSES)))


def _sample_box(rng, spec: SceneSpec, existing: list[np.ndarray]):
    cls = int(rng.choice(spec.classes, p=np.asarray(spec.class_mix)[list(spec.classes)] /
                         np.sum(np.asarray(spec.class_mix)[list(spec.classes)])))
    (l_lo, l_hi), (w_lo, w_hi), (h_lo, h_hi) = SIZE_RANGES[cls]
    for _ in range(spec.placement_retries):
        l = rng.uniform(l_lo, l_hi)
        w = rng.uniform(w_lo, w_hi)
        h = rng.uniform(h_lo, h_hi)
        reach = np.hypot(l, w) / 2.0
        d_lo = spec.min_object_distance + reach
        d_hi = spec.range_m - reach - 1.0
        if d_hi <= d_lo:
            continue
        d = rng.uniform(d_lo, d_hi)
        theta = rng.uniform(-np.pi, np.pi)
        # a box is symmetric under 180-degree rotation, so yaw labels are
        # only well-defined modulo pi; emit the canonical representative to
        # keep (sin, cos) regression targets single-valued
        yaw = rng.uniform(-np.pi / 2, np.pi / 2)
        box = geo.make_box(d * np.cos(theta), d * np.sin(theta), h / 2.0, l, w, h, yaw)
        clear = all(
            np.hypot(*(box[:2] - other[:2])) > reach + np.hypot(other[3], other[4]) / 2.0 + 1.0
            for other in existing
        )
        if clear:
            return box, cls
    return None, cls


def _visible_faces(box: np.ndarray) -> list[tuple[int, float, float]]:
    """(axis, sign, area) for each face the origin sensor can see."""
    sensor = np.array([0.0, 0.0, SENSOR_HEIGHT])
    s = geo.to_canonical_frame(sensor[None, :], box)[0]
    half = box[3:6] / 2.0
    areas = (box[4] * box[5], box[3] * box[5], box[3] * box[4])  # yz, xz, xy faces
    faces = []
    for axis in range(3):
        if s[axis] > half[axis]:
            faces.append((axis, 1.0, areas[axis]))
        elif s[axis] < -half[axis]:
            faces.append((axis, -1.0, areas[axis]))
    return faces


def _sample_face_points(rng, box: np.ndarray, count: int, jitter: float) -> np.ndarray:
    """Uniform points on visible faces, nudged inward so they stay inside."""
    faces = _visible_faces(box)
    if not faces:  # sensor inside the box footprint; extremely unlikely
        faces = [(2, 1.0, box[3] * box[4])]
    areas = np.array([f[2] for f in faces])
    counts = rng.multinomial(count, areas / areas.sum())
    half = box[3:6] / 2.0
    pts = []
    for (axis, sign, _), k in zip(faces, counts):
        if k == 0:
            continue
        q = rng.uniform(-half, half, size=(k, 3))
        q[:, axis] = sign * (half[axis] - np.abs(rng.normal(0.0, jitter, size=k)).clip(0, half[axis]))
        pts.append(q)
    if not pts:
        return np.zeros((0, 3))
    q = np.concatenate(pts, axis=0)
    c, s = np.cos(box[6]), np.sin(box[6])
    out = np.empty_like(q)
    out[:, 0] = c * q[:, 0] - s * q[:, 1] + box[0]
    out[:, 1] = s * q[:, 0] + c * q[:, 1] + box[1]
    out[:, 2] = q[:, 2] + box[2]
    return out


def generate(spec: SceneSpec, seed: int) -> Scene:
    """Deterministic scene for a seed: boxes, face points, ground clutter."""
    if spec.point_budget <= 0:
        raise ContractViolationError("point budget must be positive")
    rng = np.random.default_rng(seed)

    boxes: list[np.ndarray] = []
    classes: list[int] = []
    want = int(rng.integers(spec.boxes_min, spec.boxes_max + 1))
    for _ in range(want):
        box, cls = _sample_box(rng, spec, boxes)
        if box is None:
            log.info("seed %d: placement failed after retries, emitting fewer boxes", seed)
            continue
        boxes.append(box)
        classes.append(cls)

    n_clutter = int(spec.point_budget * spec.clutter_fraction)
    obj_budget = spec.point_budget - n_clutter
    if boxes and obj_budget < len(boxes):
        boxes = boxes[:max(1, obj_budget)]
        classes = classes[:len(boxes)]

    chunks = []
    if boxes:
        dists = np.array([np.hypot(b[0], b[1]) for b in boxes])
        vis_area = np.array([sum(f[2] for f in _visible_faces(b)) or b[3] * b[4] for b in boxes])
        weights = vis_area / np.maximum(dists, 1.0) ** 2
        counts = np.maximum(1, np.floor(obj_budget * weights / weights.sum()).astype(int))
        while counts.sum() > obj_budget:
            counts[int(np.argmax(counts))] -= 1
        for box, k in zip(boxes, counts):
            chunks.append(_sample_face_points(rng, box, int(k), spec.face_jitter))

    if n_clutter > 0:
        got = []
        need = n_clutter
        for _ in range(50):
            if need <= 0:
                break
            u = rng.uniform(0, 1, size=need)
            r = 2.0 * (spec.range_m / 2.0) ** u  # density falls off ~1/d^2
            th = rng.uniform(-np.pi, np.pi, size=need)
            z = np.abs(rng.normal(0.0, 0.03, size=need))
            cand = np.stack([r * np.cos(th), r * np.sin(th), z], axis=1)
            keep = np.ones(need, dtype=bool)
            for box in boxes:
                keep &= ~geo.points_in_box(cand, box)
            got.append(cand[keep])
            need -= int(keep.sum())
        if got:
            chunks.append(np.concatenate(got, axis=0))

    coords = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, 3))
    intensity = rng.uniform(0.0, 1.0, size=coords.shape[0])
    gt = np.stack(boxes) if boxes else np.zeros((0, 7))
    # quantize to the f32 precision of the scene file format, so saving and
    # reloading reproduces the in-memory scene exactly
    f32 = lambda a: a.astype("<f4").astype(np.float64)
    return Scene(
        pc=PointCloud(coords=f32(coords), intensity=f32(intensity)),
        gt_boxes=f32(gt),
        gt_classes=np.asarray(classes, dtype=np.int64),
        range_m=float(np.float32(spec.range_m)),
        seed=int(seed),
    )


# ---------------------------------------------------------------------------
# scene file I/O


def save_scene(scene: Scene, path) -> None:
    has_intensity = scene.pc.intensity is not None
    n = scene.pc.n
    b = scene.gt_boxes.shape[0]
    header = _HEADER.pack(MAGIC, VERSION, n, b, 1 if has_intensity else 0,
                          float(scene.range_m), int(scene.seed))
    pts = np.zeros((n, 4), dtype="<f4")
    pts[:, :3] = scene.pc.coords
    if has_intensity:
        pts[:, 3] = scene.pc.intensity
    body = bytearray()
    body += header
    body += pts.tobytes()
    for k in range(b):
        body += _BOX.pack(*scene.gt_boxes[k].astype(np.float64), int(scene.gt_classes[k]))
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, version, n, b, flags, range_m, seed = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version} (expected {VERSION})")
    expected = _HEADER.size + n * 16 + b * _BOX.size
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")

    pts = np.frombuffer(raw, dtype="<f4", count=n * 4, offset=_HEADER.size).reshape(n, 4)
    coords = pts[:, :3].astype(np.float64)
    intensity = pts[:, 3].astype(np.float64) if flags & 1 else None
    boxes = np.zeros((b, 7), dtype=np.float64)
    classes = np.zeros(b, dtype=np.int64)
    off = _HEADER.size + n * 16
    for k in range(b):
        *vals, cls = _BOX.unpack_from(raw, off + k * _BOX.size)
        boxes[k] = vals
        classes[k] = cls
    return Scene(
        pc=PointCloud(coords=coords, intensity=intensity),
        gt_boxes=boxes, gt_classes=classes, range_m=float(range_m), seed=int(seed),
    )
