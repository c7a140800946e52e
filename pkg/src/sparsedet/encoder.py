"""Dynamic voxelization and a sparse voxel feature encoder.

Only occupied cells are ever materialized: the voxel table is a hash of
integer cell keys, so memory tracks points + occupied voxels and never the
perception area.  No point is dropped and nothing is padded; per-voxel work
uses the segment primitives with the point-to-voxel index.

The feature extractor is deliberately small: a two-layer per-voxel block
(pointwise LinNormAct, max-pool, concat, LinNormAct), a couple of rounds of
27-neighborhood mean aggregation between occupied voxels, and one LinNormAct
that fuses the broadcast voxel feature with each point's offset to its voxel
center.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ContractViolationError

NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


@dataclass
class SparseVoxelGrid:
    keys: np.ndarray            # (M, 3) integer cell coordinates, unique
    point_to_voxel: np.ndarray  # (N,) voxel id per point, contiguous [0, M)
    num_voxels: int
    voxel_size: np.ndarray      # (3,) meters
    origin: np.ndarray          # (3,) meters
    voxel_features: np.ndarray | None = field(default=None)

    def voxel_centers(self) -> np.ndarray:
        return self.origin + (self.keys.astype(np.float64) + 0.5) * self.voxel_size


def voxelize(coords, voxel_size, origin=(0.0, 0.0, 0.0)) -> SparseVoxelGrid:
    """Assign every point to its floor-cell; ids are first-occurrence ordered."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,)).copy()
    if np.any(vs <= 0):
        raise ContractViolationError(f"voxel_size must be positive, got {vs}")
    org = np.asarray(origin, dtype=np.float64).reshape(3)

    if coords.shape[0] == 0:
        return SparseVoxelGrid(
            keys=np.zeros((0, 3), dtype=np.int64),
            point_to_voxel=np.zeros(0, dtype=np.int64),
            num_voxels=0, voxel_size=vs, origin=org,
        )

    keys = np.floor((coords - org) / vs).astype(np.int64)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty(order.shape[0], dtype=np.int64)
    rank[order] = np.arange(order.shape[0])
    return SparseVoxelGrid(
        keys=uniq[order],
        point_to_voxel=rank[inverse.reshape(-1)],
        num_voxels=int(uniq.shape[0]),
        voxel_size=vs, origin=org,
    )


def neighbor_pairs(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(src, dst) voxel-id pairs for each occupied 3x3x3 neighbor, self included.

    Implemented as 27 sorted-array joins on linearized keys; the enumeration
    order is fixed (offset rank, then voxel id), keeping the downstream mean
    reduction deterministic.
    """
    m = keys.shape[0]
    if m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    shifted = keys - keys.min(axis=0) + 1
    dims = shifted.max(axis=0) + 2
    code = (shifted[:, 0] * dims[1] + shifted[:, 1]) * dims[2] + shifted[:, 2]
    order = np.argsort(code, kind="stable")
    sorted_code = code[order]

    src_parts, dst_parts = [], []
    all_ids = np.arange(m, dtype=np.int64)
    for off in NEIGHBOR_OFFSETS:
        target = code + (off[0] * dims[1] + off[1]) * dims[2] + off[2]
        pos = np.searchsorted(sorted_code, target)
        pos_clipped = np.minimum(pos, m - 1)
        hit = sorted_code[pos_clipped] == target
        src_parts.append(order[pos_clipped[hit]])
        dst_parts.append(all_ids[hit])
    return np.concatenate(src_parts), np.concatenate(dst_parts)


def init_params(store: nn.ParamStore, rng, in_channels: int, vfe_hidden: int,
                channels: int) -> None:
    nn.add_lin_norm_act(store, "enc.vfe1", in_channels, vfe_hidden, rng)
    nn.add_lin_norm_act(store, "enc.vfe2", 2 * vfe_hidden, channels, rng)
    nn.add_lin_norm_act(store, "enc.point", channels + 3, channels, rng)


def encode(grid: SparseVoxelGrid, coords, intensity, tp: nn.TapeParams,
           rounds: int = 2) -> ad.Tensor:
    """Per-point features for a voxelized cloud; differentiable w.r.t. params."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    if coords.shape[0] != grid.point_to_voxel.shape[0]:
        raise ContractViolationError("grid was built from a different cloud")
    dtype = tp.store.dtype
    p2v = grid.point_to_voxel
    m = grid.num_voxels

    offsets = coords - grid.voxel_centers()[p2v]
    if intensity is None:
        inten = np.zeros((coords.shape[0], 1))
    else:
        inten = np.asarray(intensity, dtype=np.float64).reshape(-1, 1)
    expected_in = tp.store["enc.vfe1.w"].shape[0]
    point_in = np.concatenate([offsets, inten], axis=1)[:, :expected_in]
    if point_in.shape[1] != expected_in:
        raise ContractViolationError(
            f"encoder configured for {expected_in} input channels, scene provides {point_in.shape[1]}"
        )

    x = ad.const(point_in, dtype=dtype)
    f1 = nn.lin_norm_act(tp, "enc.vfe1", x)
    agg = ad.segment_broadcast(ad.segment_pool(f1, p2v, m, "max"), p2v)
    f2 = nn.lin_norm_act(tp, "enc.vfe2", ad.concat([f1, agg], axis=1))
    vox = ad.segment_pool(f2, p2v, m, "max")

    if m > 0 and rounds > 0:
        src, dst = neighbor_pairs(grid.keys)
        for _ in range(rounds):
            vox = ad.segment_pool(ad.take_rows(vox, src), dst, m, "avg")

    grid.voxel_features = vox.data
    per_point = ad.concat(
        [ad.segment_broadcast(vox, p2v), ad.const(offsets, dtype=dtype)], axis=1
    )
    return nn.lin_norm_act(tp, "enc.point", per_point)
