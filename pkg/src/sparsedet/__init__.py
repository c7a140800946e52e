"""sparsedet: fully sparse LiDAR 3D object detection at desk scale.

The pipeline never allocates grids sized by the perception range: voxel
features, instance grouping and per-group prediction all operate on occupied
entities only, so compute and memory follow the number of input points.
"""

import os

# FSD_THREADS caps worker threads, including the BLAS pools numpy may spin
# up.  Must run before numpy is first imported to take effect.
_cap = os.environ.get("FSD_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _cap)
del os

__version__ = "0.1.0"


def thread_cap() -> int:
    """Worker-thread cap from FSD_THREADS; 1 (serial) when unset or invalid."""
    import os

    raw = os.environ.get("FSD_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1
