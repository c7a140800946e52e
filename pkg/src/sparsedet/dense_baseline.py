"""Dense bird's-eye-view baseline detector for the scaling comparison.

This is the architecture the sparse pipeline exists to avoid: points are
pillar-pooled into a dense grid covering the whole perception square, a
stack of stride-1 convolutions diffuses features toward object centers, and
a center-style head predicts per-cell class heatmaps plus box regression.
Cost is Theta(grid cells) = Theta((range / cell)^2) by construction,
regardless of how empty the scene is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from . import autodiff as ad
from . import geometry as geo
from . import nn
from .detector import Detections
from .errors import CapacityError, ContractViolationError
from .synth import NUM_CLASSES, PointCloud, Scene


@dataclass
class DenseGridSpec:
    cell: float = 0.5
    channels: int = 8
    layers: int = 6
    memory_cap_mb: float = 4096.0

    def grid_side(self, range_m: float) -> int:
        return int(np.ceil(2.0 * range_m / self.cell))


@dataclass
class DenseOutput:
    heatmap: ad.Tensor  # (H, W, num_classes) logits
    reg: ad.Tensor      # (H, W, 8)
    side: int
    range_m: float


def init_params(store: nn.ParamStore, rng, spec: DenseGridSpec,
                num_classes: int = NUM_CLASSES) -> None:
    c = spec.channels
    nn.add_lin_norm_act(store, "dense.point", 4, c, rng)
    for l in range(spec.layers):
        store.create(f"dense.conv{l}.w", rng.normal(0.0, np.sqrt(2.0 / (9 * c)), size=(3, 3, c, c)))
        store.create(f"dense.conv{l}.b", np.zeros(c))
    # background-heavy prior: start heatmap logits well below zero
    nn.add_linear(store, "dense.hm", c, num_classes, rng, b_init=-4.0)
    nn.add_linear(store, "dense.reg", c, 8, rng)


def forward(store: nn.ParamStore, spec: DenseGridSpec, pc: PointCloud,
            range_m: float, tp: nn.TapeParams | None = None) -> DenseOutput:
    """Pillar pooling into a dense grid, conv stack, per-cell heads."""
    side = spec.grid_side(range_m)
    grid_bytes = side * side * spec.channels * np.dtype(store.dtype).itemsize
    if grid_bytes > spec.memory_cap_mb * 2**20:
        raise CapacityError(
            f"dense grid {side}x{side}x{spec.channels} needs {grid_bytes / 2**20:.0f} MiB, "
            f"cap is {spec.memory_cap_mb:.0f} MiB"
        )
    if tp is None:
        tp = nn.TapeParams(store)
    coords = pc.coords
    n = coords.shape[0]

    ix = np.floor((coords[:, 0] + range_m) / spec.cell).astype(np.int64)
    iy = np.floor((coords[:, 1] + range_m) / spec.cell).astype(np.int64)
    inside = (ix >= 0) & (ix < side) & (iy >= 0) & (iy < side)
    cell_ids = np.where(inside, ix * side + iy, -1)

    centers_x = (ix + 0.5) * spec.cell - range_m
    centers_y = (iy + 0.5) * spec.cell - range_m
    inten = pc.intensity if pc.intensity is not None else np.zeros(n)
    point_in = np.stack(
        [coords[:, 0] - centers_x, coords[:, 1] - centers_y, coords[:, 2], inten], axis=1
    )
    pf = nn.lin_norm_act(tp, "dense.point", ad.const(point_in, dtype=store.dtype))
    # the dense allocation: every cell gets a row whether occupied or not
    grid_flat = ad.segment_pool(pf, cell_ids, side * side, "avg")
    x = ad.reshape(grid_flat, (side, side, spec.channels))
    for l in range(spec.layers):
        x = ad.gelu(ad.conv2d_3x3(x, tp(f"dense.conv{l}.w"), tp(f"dense.conv{l}.b")))
    heatmap = ad.grid_linear(x, tp("dense.hm.w"), tp("dense.hm.b"))
    reg = ad.grid_linear(x, tp("dense.reg.w"), tp("dense.reg.b"))
    return DenseOutput(heatmap=heatmap, reg=reg, side=side, range_m=range_m)


# ---------------------------------------------------------------------------
# targets, loss, decode


def gaussian_radius_cells(box, cell: float) -> float:
    return max(1.0, float(np.hypot(box[3], box[4]) / (6.0 * cell)))


def build_targets(gt_boxes, gt_classes, side: int, cell: float, range_m: float,
                  num_classes: int = NUM_CLASSES):
    """Per-cell gaussian heatmaps plus box regression at center cells."""
    hm = np.zeros((side, side, num_classes), dtype=np.float64)
    reg = np.zeros((side, side, 8), dtype=np.float64)
    mask = np.zeros((side, side), dtype=bool)
    for k in range(gt_boxes.shape[0]):
        box = gt_boxes[k]
        c = int(gt_classes[k])
        ix = int(np.floor((box[0] + range_m) / cell))
        iy = int(np.floor((box[1] + range_m) / cell))
        if not (0 <= ix < side and 0 <= iy < side):
            continue
        sigma = gaussian_radius_cells(box, cell) / 3.0
        reach = int(np.ceil(3 * sigma))
        xs = np.arange(max(0, ix - reach), min(side, ix + reach + 1))
        ys = np.arange(max(0, iy - reach), min(side, iy + reach + 1))
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        g = np.exp(-((gx - ix) ** 2 + (gy - iy) ** 2) / (2.0 * sigma**2))
        hm[gx, gy, c] = np.maximum(hm[gx, gy, c], g)
        hm[ix, iy, c] = 1.0
        cx_cell = (ix + 0.5) * cell - range_m
        cy_cell = (iy + 0.5) * cell - range_m
        reg[ix, iy] = [
            box[0] - cx_cell, box[1] - cy_cell, box[2],
            np.log(box[3]), np.log(box[4]), np.log(box[5]),
            np.sin(box[6]), np.cos(box[6]),
        ]
        mask[ix, iy] = True
    return hm, reg, mask


def loss(out: DenseOutput, scene: Scene, spec: DenseGridSpec) -> tuple[dict, ad.Tensor]:
    hm_t, reg_t, mask = build_targets(scene.gt_boxes, scene.gt_classes, out.side,
                                      spec.cell, out.range_m)
    n_pos = max(int(mask.sum()), 1)
    hm_flat = ad.reshape(out.heatmap, (-1, out.heatmap.data.shape[2]))
    l_hm = ad.mul_const(
        ad.sum_all(ad.gaussian_focal(hm_flat, hm_t.reshape(-1, hm_t.shape[2]))), 1.0 / n_pos
    )
    rows = np.nonzero(mask.reshape(-1))[0]
    reg_flat = ad.reshape(out.reg, (-1, 8))
    if rows.size:
        pred = ad.take_rows(reg_flat, rows)
        target = reg_t.reshape(-1, 8)[rows]
        l_reg = ad.mul_const(
            ad.sum_all(ad.abs_(ad.sub(pred, ad.const(target, dtype=pred.data.dtype)))),
            1.0 / (rows.size * 8),
        )
    else:
        l_reg = ad.const(np.asarray(0.0, dtype=out.reg.data.dtype))
    total = ad.add(l_hm, l_reg)
    return {"l_hm": float(l_hm.data), "l_reg": float(l_reg.data),
            "total": float(total.data)}, total


def decode(out: DenseOutput, spec: DenseGridSpec, score_threshold: float = 0.1,
           nms_iou: float = 0.25, top_k: int = 64) -> Detections:
    """Peak picking on the sigmoid heatmap, then box decode and rotated NMS."""
    logits = out.heatmap.data.astype(np.float64)
    prob = 1.0 / (1.0 + np.exp(-logits))
    peaks = prob == maximum_filter(prob, size=(3, 3, 1), mode="constant")
    cand = np.argwhere(peaks & (prob >= score_threshold))
    if cand.shape[0] == 0:
        return Detections.empty()
    scores = prob[cand[:, 0], cand[:, 1], cand[:, 2]]
    order = np.argsort(-scores, kind="stable")[:top_k]
    cand = cand[order]
    scores = scores[order]

    boxes = np.zeros((cand.shape[0], 7), dtype=np.float64)
    classes = np.zeros(cand.shape[0], dtype=np.int64)
    for i, (ix, iy, c) in enumerate(cand):
        r = out.reg.data[ix, iy].astype(np.float64)
        cx = (ix + 0.5) * spec.cell - out.range_m + r[0]
        cy = (iy + 0.5) * spec.cell - out.range_m + r[1]
        dims = np.exp(np.clip(r[3:6], -4.0, 4.0))
        yaw = np.arctan2(r[6], r[7])
        boxes[i] = [cx, cy, r[2], dims[0], dims[1], dims[2], yaw]
        classes[i] = c

    kept: list[int] = []
    for c in np.unique(classes):
        rows = np.nonzero(classes == c)[0]
        sel = geo.nms_bev(boxes[rows], scores[rows], nms_iou)
        kept.extend(rows[sel].tolist())
    kept_arr = np.asarray(sorted(kept, key=lambda i: -scores[i]), dtype=np.int64)
    return Detections(boxes=boxes[kept_arr], scores=scores[kept_arr], classes=classes[kept_arr])


# ---------------------------------------------------------------------------
# training


def train(scenes: list[Scene], spec: DenseGridSpec, steps: int, lr: float = 1e-3,
          seed: int = 0, weight_decay: float = 0.01, dtype=np.float32) -> nn.ParamStore:
    """Small AdamW loop mirroring the sparse trainer; single-scene batches."""
    from .training import AdamW, clip_gradients, cosine_lr_scale

    if not scenes:
        raise ContractViolationError("no training scenes")
    rng = np.random.default_rng(seed)
    store = nn.ParamStore(dtype)
    init_params(store, rng, spec)
    opt = AdamW(store, lr, weight_decay)
    order_rng = np.random.default_rng(seed + 1)
    order: list[int] = []
    while len(order) < steps:
        order.extend(order_rng.permutation(len(scenes)).tolist())
    for step, idx in enumerate(order[:steps]):
        scene = scenes[idx]
        tp = nn.TapeParams(store)
        out = forward(store, spec, scene.pc, scene.range_m, tp=tp)
        _, total = loss(out, scene, spec)
        ad.backward(total)
        opt.step(clip_gradients(tp.grads(), 10.0), lr_scale=cosine_lr_scale(step, steps))
    return store
