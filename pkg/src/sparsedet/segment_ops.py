"""Group-indexed reduction and broadcast primitives.

Every point (row of a feature array) carries a group id in ``[0, num_groups)``
or the sentinel :data:`NONE_ID` for ungrouped rows.  ``dynamic_pool`` reduces
the rows of each group to a single row; ``dynamic_broadcast`` is the inverse
gather.  Exact adjoints of both are provided so the rest of the pipeline can
backpropagate through them.

Determinism: member rows are stably sorted by group id and reduced with
``np.ufunc.reduceat``, whose per-segment reduction order is fixed, single
threaded.  Results are therefore bit-identical across runs regardless of any
outer-level parallelism.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolationError

NONE_ID = -1

_REDUCES = ("max", "avg", "sum")


def _as_feature_array(f) -> np.ndarray:
    f = np.asarray(f)
    if f.ndim != 2:
        raise ContractViolationError(f"feature array must be 2-D, got shape {f.shape}")
    return f


def _check_ids(group_ids, num_groups: int, n_rows: int) -> np.ndarray:
    ids = np.asarray(group_ids)
    if ids.ndim != 1 or not np.issubdtype(ids.dtype, np.integer):
        raise ContractViolationError("group ids must be a 1-D integer array")
    if ids.shape[0] != n_rows:
        raise ContractViolationError(
            f"length mismatch: {n_rows} feature rows vs {ids.shape[0]} group ids"
        )
    if num_groups < 0:
        raise ContractViolationError("num_groups must be >= 0")
    if ids.size:
        lo = int(ids.min())
        hi = int(ids.max())
        if lo < NONE_ID or hi >= num_groups:
            raise ContractViolationError(
                f"group ids must lie in [{NONE_ID}, {num_groups}), got range [{lo}, {hi}]"
            )
    return ids


def group_sizes(group_ids, num_groups: int) -> np.ndarray:
    """Number of member rows per group; NONE rows are ignored."""
    ids = _check_ids(group_ids, num_groups, np.asarray(group_ids).shape[0])
    valid = ids != NONE_ID
    return np.bincount(ids[valid], minlength=num_groups).astype(np.int64)


def _sorted_segments(ids: np.ndarray):
    """Stable sort of member rows by group id, plus segment boundaries.

    Returns (rows, sorted_ids, starts, present) where rows indexes the
    original array in sorted order and starts marks each present group's
    segment start.  Stability keeps original row order within a group.
    """
    rows = np.nonzero(ids != NONE_ID)[0]
    order = np.argsort(ids[rows], kind="stable")
    rows = rows[order]
    svids = ids[rows]
    if rows.size == 0:
        return rows, svids, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    starts = np.nonzero(np.concatenate(([True], svids[1:] != svids[:-1])))[0]
    present = svids[starts]
    return rows, svids, starts, present


def dynamic_pool(features, group_ids, num_groups: int, reduce: str = "max") -> np.ndarray:
    """Reduce feature rows per group.

    Args:
        features: (N, C) array.
        group_ids: (N,) int array with entries in [0, num_groups) or NONE_ID.
        num_groups: number of output rows M.
        reduce: one of "max", "avg", "sum".

    Returns:
        (M, C) array.  Row k is the reduction over rows with id k.  Rows with
        NONE_ID contribute nothing.  Empty groups reduce to the zero vector.
    """
    f = _as_feature_array(features)
    ids = _check_ids(group_ids, num_groups, f.shape[0])
    if reduce not in _REDUCES:
        raise ContractViolationError(f"unknown reduction {reduce!r}; expected one of {_REDUCES}")

    out = np.zeros((num_groups, f.shape[1]), dtype=f.dtype)
    rows, _, starts, present = _sorted_segments(ids)
    if rows.size == 0:
        return out

    sf = f[rows]
    if reduce == "max":
        out[present] = np.maximum.reduceat(sf, starts, axis=0)
        return out
    sums = np.add.reduceat(sf, starts, axis=0)
    if reduce == "avg":
        counts = np.diff(np.append(starts, rows.size))
        sums = sums / counts[:, None]
    out[present] = sums
    return out


def dynamic_broadcast(group_features, group_ids) -> np.ndarray:
    """Gather each group's row back to its member rows.

    Rows with NONE_ID receive the zero vector.
    """
    g = _as_feature_array(group_features)
    ids = _check_ids(group_ids, g.shape[0], np.asarray(group_ids).shape[0])
    out = np.zeros((ids.shape[0], g.shape[1]), dtype=g.dtype)
    valid = ids != NONE_ID
    out[valid] = g[ids[valid]]
    return out


def pool_backward(features, group_ids, num_groups: int, reduce: str, upstream) -> np.ndarray:
    """Adjoint of :func:`dynamic_pool` with respect to ``features``.

    sum copies the upstream row to every member; avg splits it by group size;
    max routes it to the first member row attaining the per-channel maximum.
    """
    f = _as_feature_array(features)
    ids = _check_ids(group_ids, num_groups, f.shape[0])
    u = _as_feature_array(upstream)
    if u.shape != (num_groups, f.shape[1]):
        raise ContractViolationError(
            f"upstream shape {u.shape} does not match pooled shape {(num_groups, f.shape[1])}"
        )
    if reduce not in _REDUCES:
        raise ContractViolationError(f"unknown reduction {reduce!r}; expected one of {_REDUCES}")

    grad = np.zeros_like(f)
    rows, svids, starts, present = _sorted_segments(ids)
    if rows.size == 0:
        return grad

    valid = ids != NONE_ID
    vids = ids[valid]
    if reduce == "sum":
        grad[valid] = u[vids]
        return grad
    if reduce == "avg":
        counts = np.maximum(np.bincount(vids, minlength=num_groups), 1)
        grad[valid] = u[vids] / counts[vids][:, None]
        return grad

    # max: find, per (group, channel), the smallest member row index whose
    # value equals the pooled maximum; that row receives the gradient.
    sf = f[rows]
    pooled = np.maximum.reduceat(sf, starts, axis=0)
    is_arg = sf == pooled[np.searchsorted(present, svids)]
    n = f.shape[0]
    candidate = np.where(is_arg, rows[:, None], n)
    winner = np.minimum.reduceat(candidate, starts, axis=0)

    gi, ci = np.nonzero(winner < n)
    np.add.at(grad, (winner[gi, ci], ci), u[present[gi], ci])
    return grad


def broadcast_backward(upstream, group_ids, num_groups: int) -> np.ndarray:
    """Adjoint of :func:`dynamic_broadcast`: per-group sum of upstream rows."""
    return dynamic_pool(upstream, group_ids, num_groups, reduce="sum")
