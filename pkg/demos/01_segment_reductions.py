"""Dynamic pooling and broadcasting: the primitives everything else uses.

Points carry group ids; pooling reduces each group to one row, broadcasting
gathers group rows back per point.  No padding, no fixed group size.
"""

import numpy as np

from sparsedet.segment_ops import (
    NONE_ID, broadcast_backward, dynamic_broadcast, dynamic_pool, pool_backward,
)

rng = np.random.default_rng(0)

features = rng.normal(size=(8, 3)).round(2)
group_ids = np.array([0, 0, 1, 1, 1, 2, NONE_ID, 0])
print("features:\n", features)
print("group ids:", group_ids, "(−1 = ungrouped)\n")

for reduce in ("max", "avg", "sum"):
    pooled = dynamic_pool(features, group_ids, 3, reduce)
    print(f"{reduce}-pool -> one row per group:\n", pooled.round(3))

pooled = dynamic_pool(features, group_ids, 3, "avg")
back = dynamic_broadcast(pooled, group_ids)
print("\nbroadcast returns each point its group's row; ungrouped rows are zero:")
print(back.round(3))

# exact adjoints: <pool(f), u> == <f, pool_backward(u)> for linear reductions
u = rng.normal(size=pooled.shape)
lhs = float((dynamic_pool(features, group_ids, 3, "sum") * u).sum())
rhs = float((features * pool_backward(features, group_ids, 3, "sum", u)).sum())
print(f"\nadjoint identity for sum: {lhs:.6f} == {rhs:.6f}")

g = broadcast_backward(back, group_ids, 3)
print("gradient of broadcast is the segment sum:\n", g.round(3))
