"""Foreground voting and instance grouping.

Each point gets class logits and a 3D offset pointing at its object center.
Points confident enough in a foreground class participate in grouping: their
voted centers become graph vertices, vertices closer than a per-class radius
are connected, and each connected component becomes one instance group.  The
component search runs on a spatial hash with cell edge equal to the radius,
so only the 27 surrounding cells are ever inspected per point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from . import segment_ops
from .errors import ContractViolationError


@dataclass
class VoteResult:
    fg_logits: ad.Tensor      # (N, num_classes + 1), background last
    offsets: ad.Tensor        # (N, 3)
    voted_centers: ad.Tensor  # (N, 3) = coords + offsets


@dataclass
class Grouping:
    ids: np.ndarray          # (N,) group id or NONE_ID
    num_groups: int
    centers: np.ndarray      # (M, 3) centroid of member voted centers
    group_class: np.ndarray  # (M,)


def init_vote_params(store: nn.ParamStore, rng, channels: int, hidden: int,
                     num_classes: int) -> None:
    # +1: absolute height joins the encoder features.  Scenes are ground
    # referenced, and center-height offsets are unlearnable without it.
    nn.add_mlp_head(store, "vote.cls", channels + 1, hidden, num_classes + 1, rng)
    nn.add_mlp_head(store, "vote.off", channels + 1, hidden, 3, rng)


def vote(point_features: ad.Tensor, coords, tp: nn.TapeParams) -> VoteResult:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    feats = ad.concat(
        [point_features, ad.const(coords[:, 2:3], dtype=tp.store.dtype)], axis=1
    )
    logits = nn.mlp_head(tp, "vote.cls", feats)
    offsets = nn.mlp_head(tp, "vote.off", feats)
    voted = ad.add(offsets, ad.const(coords, dtype=tp.store.dtype))
    return VoteResult(fg_logits=logits, offsets=offsets, voted_centers=voted)


def _candidate_edges(pts: np.ndarray, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """All point pairs closer than radius, found via a radius-edge grid hash.

    Each unordered cell pair is examined once (the cell itself plus 13
    forward neighbor offsets), so each qualifying point pair appears once.
    """
    n = pts.shape[0]
    cells = np.floor(pts / radius).astype(np.int64)
    buckets: dict[tuple, np.ndarray] = {}
    order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
    sorted_cells = cells[order]
    changes = np.nonzero(
        np.concatenate(([True], np.any(sorted_cells[1:] != sorted_cells[:-1], axis=1)))
    )[0]
    for s, e in zip(changes, np.append(changes[1:], n)):
        buckets[tuple(sorted_cells[s])] = order[s:e]

    half = [
        off
        for off in ((dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1))
        if off > (0, 0, 0)
    ]
    r2 = radius * radius
    us, vs = [], []
    for cell, a in buckets.items():
        d2 = ((pts[a][:, None, :] - pts[a][None, :, :]) ** 2).sum(axis=2)
        ii, jj = np.nonzero(np.triu(d2 < r2, k=1))
        if ii.size:
            us.append(a[ii])
            vs.append(a[jj])
        for off in half:
            b = buckets.get((cell[0] + off[0], cell[1] + off[1], cell[2] + off[2]))
            if b is None:
                continue
            d2 = ((pts[a][:, None, :] - pts[b][None, :, :]) ** 2).sum(axis=2)
            ii, jj = np.nonzero(d2 < r2)
            if ii.size:
                us.append(a[ii])
                vs.append(b[jj])
    if not us:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(us), np.concatenate(vs)


def connected_components(points, radius: float) -> np.ndarray:
    """Label points whose distance is strictly below ``radius``, transitively.

    Returns contiguous labels ordered by first occurrence.  Components are
    resolved by minimum-label propagation over the candidate edges with
    pointer jumping, which is equivalent to union-find over the same edges
    and fully vectorized.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    if radius <= 0:
        raise ContractViolationError(f"radius must be positive, got {radius}")
    if n == 0:
        return np.zeros(0, dtype=np.int64)

    u, v = _candidate_edges(pts, radius)
    labels = np.arange(n, dtype=np.int64)
    while True:
        m = np.minimum(labels[u], labels[v])
        before = labels.copy()
        np.minimum.at(labels, u, m)
        np.minimum.at(labels, v, m)
        while True:  # pointer jumping: chase labels to their roots
            hop = labels[labels]
            if np.array_equal(hop, labels):
                break
            labels = hop
        if np.array_equal(before, labels):
            break

    # contiguous relabel by first occurrence (roots are min member indices)
    _, first, inverse = np.unique(labels, return_index=True, return_inverse=True)
    rank = np.empty(first.shape[0], dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(first.shape[0])
    return rank[inverse.reshape(-1)]


def ccl_group(votes: VoteResult, radius_per_class, fg_threshold: float) -> Grouping:
    """Cluster voted centers into instance groups, per predicted class.

    A point participates for its argmax foreground class when that class's
    probability exceeds the threshold; everyone else gets NONE_ID.  Points of
    different classes never share a group.
    """
    logits = votes.fg_logits.data
    voted = votes.voted_centers.data
    n, width = logits.shape
    num_classes = width - 1
    radii = np.broadcast_to(np.asarray(radius_per_class, dtype=np.float64), (num_classes,))
    if np.any(radii <= 0):
        raise ContractViolationError("all per-class radii must be positive")

    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    fg = probs[:, :num_classes]
    cls = fg.argmax(axis=1) if n else np.zeros(0, dtype=np.int64)
    participates = n and fg[np.arange(n), cls] > fg_threshold

    ids = np.full(n, segment_ops.NONE_ID, dtype=np.int64)
    group_class: list[int] = []
    next_id = 0
    for c in range(num_classes):
        sel = np.nonzero(participates & (cls == c))[0] if n else np.zeros(0, dtype=np.int64)
        if sel.size == 0:
            continue
        labels = connected_components(voted[sel], float(radii[c]))
        ids[sel] = labels + next_id
        k = int(labels.max()) + 1
        group_class.extend([c] * k)
        next_id += k

    centers = segment_ops.dynamic_pool(voted, ids, next_id, "avg")
    return Grouping(
        ids=ids,
        num_groups=next_id,
        centers=centers,
        group_class=np.asarray(group_class, dtype=np.int64),
    )
