"""Losses, target assignment, optimizer loop and checkpointing.

Six loss terms drive the pipeline: per-point semantics and voting, per-group
classification and box regression, and per-corrected-group residual and
IoU-calibrated confidence.  The total is their weighted sum; each term is
normalized before summation (classification sums by positive count, the L1
terms by participating-entry count) since an unnormalized sum would let the
point-rich near field drown everything else.

Checkpoints are a small versioned binary container of the named parameter
matrices plus the config hash; the metrics log is append-only JSON lines
with deterministic content (wall-clock timings go to a separate sidecar so
reruns stay byte-identical).
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import detector
from . import geometry as geo
from .config import RunConfig
from .errors import ContractViolationError, DataError, NumericError
from .instance_net import residual_target, soft_iou_label
from .nn import ParamStore
from .segment_ops import NONE_ID
from .synth import NUM_CLASSES, Scene

CHECKPOINT_MAGIC = b"FSDC"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# loss primitives


def _as_tensor(x) -> ad.Tensor:
    return x if isinstance(x, ad.Tensor) else ad.const(np.asarray(x, dtype=np.float64))


def focal_loss(logits, targets, gamma: float = 2.0, alpha: float = 0.25,
               reduction: str = "mean") -> ad.Tensor:
    """Softmax focal loss over integer class targets.

    gamma=0, alpha=1 reduces to plain cross entropy.  "mean" averages over
    rows; "sum" leaves normalization to the caller.
    """
    logits = _as_tensor(logits)
    per_row = ad.softmax_focal(logits, targets, gamma, alpha)
    total = ad.sum_all(per_row)
    if reduction == "mean":
        return ad.mul_const(total, 1.0 / max(logits.data.shape[0], 1))
    if reduction == "sum":
        return total
    raise ContractViolationError(f"unknown reduction {reduction!r}")


def l1_loss(pred, target, mask=None) -> ad.Tensor:
    """Mean absolute error over the masked rows' entries; 0 when empty."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ContractViolationError(
            f"l1_loss shapes differ: {pred.data.shape} vs {target.shape}"
        )
    if mask is not None:
        rows = np.nonzero(np.asarray(mask))[0]
        if rows.size == 0:
            return ad.const(np.asarray(0.0, dtype=pred.data.dtype))
        pred = ad.take_rows(pred, rows)
        target = target[rows]
    n_entries = max(int(np.prod(pred.data.shape)), 1)
    diff = ad.abs_(ad.sub(pred, ad.const(target, dtype=pred.data.dtype)))
    return ad.mul_const(ad.sum_all(diff), 1.0 / n_entries)


# ---------------------------------------------------------------------------
# target assignment


@dataclass
class SceneTargets:
    sem: np.ndarray            # (N,) class id, background = NUM_CLASSES
    vote_offsets: np.ndarray   # (N, 3)
    fg_mask: np.ndarray        # (N,) bool
    group_cls: np.ndarray      # (M,)
    group_reg: np.ndarray      # (M, 8)
    group_pos: np.ndarray      # (M,) bool
    residual: np.ndarray       # (M2, 8)
    residual_mask: np.ndarray  # (M2,) bool
    q: np.ndarray              # (M2, 1) soft confidence labels


def assign_point_targets(coords, gt_boxes, gt_classes, num_classes=NUM_CLASSES):
    n = coords.shape[0]
    sem = np.full(n, num_classes, dtype=np.int64)
    offsets = np.zeros((n, 3), dtype=np.float64)
    for k in range(gt_boxes.shape[0]):
        inside = geo.points_in_box(coords, gt_boxes[k])
        sem[inside] = gt_classes[k]
        offsets[inside] = gt_boxes[k, :3] - coords[inside]
    return sem, offsets, sem != num_classes


def assign_group_targets(centers, gt_boxes, gt_classes, num_classes=NUM_CLASSES):
    m = centers.shape[0]
    cls = np.full(m, num_classes, dtype=np.int64)
    reg = np.zeros((m, 8), dtype=np.float64)
    for k in range(gt_boxes.shape[0]):
        inside = geo.points_in_box(centers, gt_boxes[k])
        cls[inside] = gt_classes[k]
        for g in np.nonzero(inside)[0]:
            reg[g] = geo.box_encode(gt_boxes[k], centers[g])
    return cls, reg, cls != num_classes


def match_proposals(boxes, gt_boxes):
    """Best 3D IoU per proposal over all ground truth; (ious, gt index or -1)."""
    m = boxes.shape[0]
    ious = np.zeros(m, dtype=np.float64)
    idx = np.full(m, -1, dtype=np.int64)
    for p in range(m):
        for k in range(gt_boxes.shape[0]):
            v = geo.iou_3d(boxes[p], gt_boxes[k])
            if v > ious[p]:
                ious[p] = v
                idx[p] = k
    return ious, idx


def build_targets(structure: detector.PipelineStructure, scene: Scene,
                  residual_iou_threshold: float,
                  num_classes: int = NUM_CLASSES) -> SceneTargets:
    coords = scene.pc.coords
    sem, vote_off, fg = assign_point_targets(coords, scene.gt_boxes, scene.gt_classes,
                                             num_classes)
    centers = structure.grouping.centers
    group_cls, group_reg, group_pos = assign_group_targets(
        centers, scene.gt_boxes, scene.gt_classes, num_classes
    )

    m2 = structure.boxes.shape[0]
    residual = np.zeros((m2, 8), dtype=np.float64)
    res_mask = np.zeros(m2, dtype=bool)
    q = np.zeros((m2, 1), dtype=np.float64)
    if m2:
        # geometry supervision is class-agnostic (a misclassified but well
        # placed proposal should still learn the correction); the confidence
        # label is zeroed on class mismatch so wrong-class boxes rank low
        ious, gt_idx = match_proposals(structure.boxes, scene.gt_boxes)
        class_ok = np.array([
            gt_idx[p] >= 0 and scene.gt_classes[gt_idx[p]] == structure.classes[p]
            for p in range(m2)
        ])
        q[:, 0] = np.where(class_ok, soft_iou_label(ious), 0.0)
        for p in range(m2):
            if ious[p] > residual_iou_threshold and gt_idx[p] >= 0:
                residual[p] = residual_target(structure.boxes[p], scene.gt_boxes[gt_idx[p]])
                res_mask[p] = True
    return SceneTargets(
        sem=sem, vote_offsets=vote_off, fg_mask=fg,
        group_cls=group_cls, group_reg=group_reg, group_pos=group_pos,
        residual=residual, residual_mask=res_mask, q=q,
    )


# ---------------------------------------------------------------------------
# total loss


@dataclass
class LossBreakdown:
    l_sem: float
    l_vote: float
    l_reg: float
    l_cls: float
    l_res: float
    l_iou: float
    total: float

    def as_dict(self) -> dict:
        return {
            "l_sem": self.l_sem, "l_vote": self.l_vote, "l_reg": self.l_reg,
            "l_cls": self.l_cls, "l_res": self.l_res, "l_iou": self.l_iou,
            "total": self.total,
        }


def total_loss(state: detector.ForwardState, targets: SceneTargets,
               weights=(1.0,) * 6) -> tuple[LossBreakdown, ad.Tensor]:
    """Assemble the six normalized terms into one scalar tape node."""
    if len(weights) != 6:
        raise ContractViolationError("six loss weights required")
    dtype = state.tp.store.dtype
    zero = lambda: ad.const(np.asarray(0.0, dtype=dtype))

    n_fg = int(targets.fg_mask.sum())
    if targets.sem.shape[0]:
        l_sem = ad.mul_const(
            focal_loss(state.votes.fg_logits, targets.sem, reduction="sum"),
            1.0 / max(n_fg, 1),
        )
    else:
        l_sem = zero()
    l_vote = l1_loss(state.votes.offsets, targets.vote_offsets, targets.fg_mask)

    if state.prediction is not None and targets.group_cls.shape[0]:
        n_pos = int(targets.group_pos.sum())
        l_cls = ad.mul_const(
            focal_loss(state.prediction.cls_logits, targets.group_cls, reduction="sum"),
            1.0 / max(n_pos, 1),
        )
        l_reg = l1_loss(state.prediction.reg, targets.group_reg, targets.group_pos)
    else:
        l_cls = zero()
        l_reg = zero()

    if state.refined is not None and targets.q.shape[0]:
        l_res = l1_loss(state.refined.residual, targets.residual, targets.residual_mask)
        q = targets.q.astype(dtype)
        l_iou = ad.mul_const(
            ad.sum_all(ad.binary_ce_logits(state.refined.confidence, q)),
            1.0 / max(q.shape[0], 1),
        )
    else:
        l_res = zero()
        l_iou = zero()

    terms = [l_sem, l_vote, l_reg, l_cls, l_res, l_iou]
    total = ad.mul_const(terms[0], float(weights[0]))
    for w, t in zip(weights[1:], terms[1:]):
        total = ad.add(total, ad.mul_const(t, float(w)))

    bd = LossBreakdown(
        l_sem=float(l_sem.data), l_vote=float(l_vote.data), l_reg=float(l_reg.data),
        l_cls=float(l_cls.data), l_res=float(l_res.data), l_iou=float(l_iou.data),
        total=float(total.data),
    )
    return bd, total


def forward_loss(store: ParamStore, cfg: RunConfig, scene: Scene,
                 frozen: tuple[detector.PipelineStructure, SceneTargets] | None = None):
    """One differentiable pass; returns (state, structure, targets, breakdown, loss)."""
    state = detector.forward(store, cfg.model, scene.pc,
                             frozen=None if frozen is None else frozen[0])
    if frozen is None:
        targets = build_targets(state.structure, scene, cfg.train.residual_iou_threshold)
    else:
        targets = frozen[1]
    bd, loss = total_loss(state, targets, cfg.train.loss_weights)
    return state, state.structure, targets, bd, loss


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay; decay applies to weight matrices only."""

    def __init__(self, store: ParamStore, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in store.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in store.arrays.items()}

    def step(self, grads: dict[str, np.ndarray], lr_scale: float = 1.0) -> None:
        self.t += 1
        lr = self.lr * lr_scale
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in self.store.arrays.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and name.endswith(".w"):
                update = update + self.weight_decay * p
            self.store.arrays[name] = (p - lr * update).astype(p.dtype, copy=False)


def cosine_lr_scale(step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return 1.0
    return float(0.5 * (1.0 + np.cos(np.pi * step / max(total_steps - 1, 1))))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    if max_norm <= 0:
        return grads
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(store: ParamStore, path, config_hash_hex: str) -> None:
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += bytes.fromhex(config_hash_hex).ljust(32, b"\x00")[:32]
    dtype_code = 0 if store.dtype == np.float64 else 1
    blob += struct.pack("<BI", dtype_code, len(store.arrays))
    for name, arr in store.arrays.items():
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc)) + enc
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8" if dtype_code == 0 else "<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_checkpoint(path) -> tuple[ParamStore, str]:
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    config_hash_hex = raw[off:off + 32].hex()
    off += 32
    dtype_code, count = struct.unpack_from("<BI", raw, off)
    off += 5
    dtype = np.float64 if dtype_code == 0 else np.float32
    store = ParamStore(dtype)
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            nbytes = int(np.prod(shape)) * (8 if dtype_code == 0 else 4)
            arr = np.frombuffer(raw, dtype="<f8" if dtype_code == 0 else "<f4",
                                count=int(np.prod(shape)), offset=off).reshape(shape)
            off += nbytes
            store.create(name, arr.copy())
    except (struct.error, ValueError) as exc:
        raise DataError(f"{path}: truncated checkpoint") from exc
    if off != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return store, config_hash_hex


# ---------------------------------------------------------------------------
# training loop


class MetricsLog:
    """Append-only JSON lines; deterministic content, timings go elsewhere."""

    def __init__(self, path, timing_path=None):
        self.path = path
        self.timing_path = timing_path
        self._fh = open(path, "w", encoding="utf-8")
        self._timing_fh = open(timing_path, "w", encoding="utf-8") if timing_path else None

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def write_timing(self, record: dict) -> None:
        if self._timing_fh is not None:
            self._timing_fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._timing_fh.flush()

    def close(self) -> None:
        self._fh.close()
        if self._timing_fh is not None:
            self._timing_fh.close()


def train(scenes: list[Scene], cfg: RunConfig, out_dir=None, log: MetricsLog | None = None,
          hash_hex: str | None = None, store: ParamStore | None = None) -> ParamStore:
    """Run the optimizer for cfg.train.steps; returns the trained parameters.

    Deterministic for a fixed config/seed: scene order, initialization and
    every update depend only on the seeded generator.  A non-finite loss
    aborts with the offending scene's seed in the message.
    """
    if not scenes:
        raise DataError("no training scenes")
    from .config import config_hash  # local import to avoid cycle at module load

    hash_hex = hash_hex or config_hash(cfg)
    dtype = np.float64 if cfg.train.dtype == "float64" else np.float32
    if store is None:
        store = detector.init_model(cfg.model, cfg.seed, dtype=dtype)
    opt = AdamW(store, cfg.train.lr, cfg.train.weight_decay)
    order_rng = np.random.default_rng(cfg.seed + 1)

    order: list[int] = []
    steps = cfg.train.steps
    while len(order) < steps:
        order.extend(order_rng.permutation(len(scenes)).tolist())
    order = order[:steps]

    if log is None and out_dir is not None:
        import os

        log = MetricsLog(os.path.join(out_dir, "metrics.jsonl"),
                         os.path.join(out_dir, "timing.jsonl"))

    for step, scene_idx in enumerate(order):
        t0 = time.perf_counter()
        scene = scenes[scene_idx]
        state, _, _, bd, loss = forward_loss(store, cfg, scene)
        if not np.isfinite(bd.total):
            raise NumericError(
                f"non-finite loss at step {step} on scene seed {scene.seed}: {bd.as_dict()}"
            )
        ad.backward(loss)
        grads = clip_gradients(state.tp.grads(), cfg.train.grad_clip)
        opt.step(grads, lr_scale=cosine_lr_scale(step, steps))
        if log is not None:
            rec = {"step": step, "scene": int(scene.seed), "config": hash_hex[:12],
                   "lr_scale": round(cosine_lr_scale(step, steps), 9)}
            rec.update({k: round(v, 9) for k, v in bd.as_dict().items()})
            log.write(rec)
            log.write_timing({"step": step, "wall_ms": (time.perf_counter() - t0) * 1e3})
        if out_dir is not None:
            every = cfg.train.checkpoint_every
            if (every > 0 and (step + 1) % every == 0) or step + 1 == steps:
                import os

                save_checkpoint(store, os.path.join(out_dir, f"ckpt_{step + 1:06d}.bin"),
                                hash_hex)
    return store
