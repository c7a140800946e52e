"""Independent brute-force oracles used by the test suite.

These deliberately avoid the library's own code paths: plain Python loops,
rejection sampling and finite differences only.  Tests compare the fast
implementations against these.
"""

import numpy as np


def pool_oracle(features, group_ids, num_groups, reduce):
    """Per-group loop reduction over explicit row slices."""
    f = np.asarray(features)
    ids = np.asarray(group_ids)
    out = np.zeros((num_groups, f.shape[1]), dtype=f.dtype)
    for k in range(num_groups):
        rows = f[ids == k]
        if rows.shape[0] == 0:
            continue
        if reduce == "max":
            out[k] = rows.max(axis=0)
        elif reduce == "avg":
            out[k] = rows.mean(axis=0)
        elif reduce == "sum":
            out[k] = rows.sum(axis=0)
        else:
            raise ValueError(reduce)
    return out


def broadcast_oracle(group_features, group_ids):
    """Row-by-row index lookup."""
    g = np.asarray(group_features)
    ids = np.asarray(group_ids)
    out = np.zeros((ids.shape[0], g.shape[1]), dtype=g.dtype)
    for j, i in enumerate(ids):
        if i >= 0:
            out[j] = g[i]
    return out


def central_fd(fn, x, h=1e-6):
    """Central finite-difference gradient of scalar fn at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x)
        flat[i] = orig - h
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def grad_rel_err(analytic, fd):
    """Worst relative disagreement, with a floor tied to the gradient scale.

    Entries whose true gradient is essentially zero only see finite-difference
    cancellation noise; comparing them at pure relative tolerance would fail
    any implementation, so the denominator never drops below 1e-3 of the
    largest gradient magnitude in the matrix.
    """
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(fd, dtype=np.float64)
    if a.size == 0:
        return 0.0
    an, f = np.abs(a), np.abs(b)
    scale = max(an.max(), f.max(), 1e-8)
    denom = np.maximum(np.maximum(an, f), 1e-3 * scale)
    return float((np.abs(a - b) / denom).max())


def pairwise_components_oracle(points, radius):
    """O(N^2) union-find over every pair closer than radius.

    Returns a canonical labelling: components numbered by the smallest row
    index they contain, relabelled contiguously in order of first occurrence.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    if n:
        d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        r2 = float(radius) ** 2
        ii, jj = np.nonzero(d2 < r2)
        for a, b in zip(ii.tolist(), jj.tolist()):
            if a < b:
                union(a, b)

    labels = np.empty(n, dtype=np.int64)
    remap = {}
    for i in range(n):
        r = find(i)
        if r not in remap:
            remap[r] = len(remap)
        labels[i] = remap[r]
    return labels


def canonical_partition(labels):
    """Frozenset-of-frozensets view of a labelling, for partition equality."""
    groups = {}
    for i, l in enumerate(np.asarray(labels).tolist()):
        groups.setdefault(l, []).append(i)
    return frozenset(frozenset(g) for g in groups.values())


def mc_iou_bev(box_a, box_b, n_samples=1_000_000, seed=0):
    """Monte-Carlo BEV IoU via rejection sampling over a bounding window."""
    rng = np.random.default_rng(seed)
    boxes = [np.asarray(box_a, dtype=np.float64), np.asarray(box_b, dtype=np.float64)]

    def corners(b):
        cx, cy, _, l, w, _, yaw = b
        dx = np.array([l, l, -l, -l]) / 2.0
        dy = np.array([w, -w, -w, w]) / 2.0
        c, s = np.cos(yaw), np.sin(yaw)
        return np.stack([cx + c * dx - s * dy, cy + s * dx + c * dy], axis=1)

    allc = np.concatenate([corners(b) for b in boxes], axis=0)
    lo = allc.min(axis=0) - 1e-9
    hi = allc.max(axis=0) + 1e-9
    pts = rng.uniform(lo, hi, size=(n_samples, 2))

    def inside(b):
        cx, cy, _, l, w, _, yaw = b
        c, s = np.cos(-yaw), np.sin(-yaw)
        px = pts[:, 0] - cx
        py = pts[:, 1] - cy
        qx = c * px - s * py
        qy = s * px + c * py
        return (np.abs(qx) <= l / 2.0) & (np.abs(qy) <= w / 2.0)

    in_a = inside(boxes[0])
    in_b = inside(boxes[1])
    window = np.prod(hi - lo)
    inter = in_a & in_b
    union = in_a | in_b
    if union.sum() == 0:
        return 0.0
    return float(inter.sum()) / float(union.sum())


def mc_iou_3d(box_a, box_b, n_samples=1_000_000, seed=0):
    """Monte-Carlo 3D IoU via rejection sampling over a bounding volume."""
    rng = np.random.default_rng(seed)
    boxes = [np.asarray(box_a, dtype=np.float64), np.asarray(box_b, dtype=np.float64)]

    def bounds(b):
        cx, cy, cz, l, w, h, _ = b
        r = np.hypot(l, w) / 2.0
        return (np.array([cx - r, cy - r, cz - h / 2]), np.array([cx + r, cy + r, cz + h / 2]))

    lows, highs = zip(*[bounds(b) for b in boxes])
    lo = np.minimum(*lows) - 1e-9
    hi = np.maximum(*highs) + 1e-9
    pts = rng.uniform(lo, hi, size=(n_samples, 3))

    def inside(b):
        cx, cy, cz, l, w, h, yaw = b
        c, s = np.cos(-yaw), np.sin(-yaw)
        px = pts[:, 0] - cx
        py = pts[:, 1] - cy
        pz = pts[:, 2] - cz
        qx = c * px - s * py
        qy = s * px + c * py
        return (np.abs(qx) <= l / 2) & (np.abs(qy) <= w / 2) & (np.abs(pz) <= h / 2)

    in_a = inside(boxes[0])
    in_b = inside(boxes[1])
    union = in_a | in_b
    if union.sum() == 0:
        return 0.0
    return float((in_a & in_b).sum()) / float(union.sum())
