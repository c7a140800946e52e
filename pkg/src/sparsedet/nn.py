"""Parameter storage and the small layer vocabulary of the pipeline.

A ``ParamStore`` is an ordered dict of named numpy arrays; a ``TapeParams``
view wraps them in tape tensors for one forward pass and collects gradients
afterwards.  The only layer kinds are LinNormAct (linear, per-row layer norm,
GELU) and plain linear output heads.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .errors import ContractViolationError


class ParamStore:
    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def create(self, name: str, array: np.ndarray) -> None:
        if name in self.arrays:
            raise ContractViolationError(f"duplicate parameter {name!r}")
        self.arrays[name] = np.asarray(array, dtype=self.dtype)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value) -> None:
        if name not in self.arrays:
            raise ContractViolationError(f"unknown parameter {name!r}")
        self.arrays[name] = np.asarray(value, dtype=self.dtype)

    def names(self):
        return list(self.arrays.keys())

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore(dtype)
        for k, v in self.arrays.items():
            out.create(k, v.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)

    def num_entries(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def flat(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=self.dtype)
        if vec.shape != (self.num_entries(),):
            raise ContractViolationError("flat vector length mismatch")
        pos = 0
        for k, v in self.arrays.items():
            self.arrays[k] = vec[pos:pos + v.size].reshape(v.shape).copy()
            pos += v.size


class TapeParams:
    """Lazily wraps store arrays as tape tensors for a single forward pass."""

    def __init__(self, store: ParamStore):
        self.store = store
        self.tensors: dict[str, ad.Tensor] = {}

    def __call__(self, name: str) -> ad.Tensor:
        t = self.tensors.get(name)
        if t is None:
            t = ad.param(self.store[name])
            self.tensors[name] = t
        return t

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t in self.tensors.items():
            out[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
        return out


# ---------------------------------------------------------------------------
# layer builders


def add_lin_norm_act(store: ParamStore, prefix: str, c_in: int, c_out: int, rng) -> None:
    store.create(f"{prefix}.w", rng.normal(0.0, np.sqrt(2.0 / c_in), size=(c_in, c_out)))
    store.create(f"{prefix}.b", np.zeros(c_out))
    store.create(f"{prefix}.gamma", np.ones(c_out))
    store.create(f"{prefix}.beta", np.zeros(c_out))


def lin_norm_act(tp: TapeParams, prefix: str, x: ad.Tensor) -> ad.Tensor:
    w = tp(f"{prefix}.w")
    if x.data.shape[1] != w.data.shape[0]:
        raise ContractViolationError(
            f"{prefix}: input has {x.data.shape[1]} channels, layer expects {w.data.shape[0]}"
        )
    y = ad.linear(x, w, tp(f"{prefix}.b"))
    y = ad.layer_norm(y, tp(f"{prefix}.gamma"), tp(f"{prefix}.beta"))
    return ad.gelu(y)


def add_linear(store: ParamStore, prefix: str, c_in: int, c_out: int, rng,
               w_std: float = 0.01, b_init: float = 0.0) -> None:
    store.create(f"{prefix}.w", rng.normal(0.0, w_std, size=(c_in, c_out)))
    store.create(f"{prefix}.b", np.full(c_out, float(b_init)))


def linear_out(tp: TapeParams, prefix: str, x: ad.Tensor) -> ad.Tensor:
    w = tp(f"{prefix}.w")
    if x.data.shape[1] != w.data.shape[0]:
        raise ContractViolationError(
            f"{prefix}: input has {x.data.shape[1]} channels, layer expects {w.data.shape[0]}"
        )
    return ad.linear(x, w, tp(f"{prefix}.b"))


def add_mlp_head(store: ParamStore, prefix: str, c_in: int, hidden: int, c_out: int, rng,
                 b_init: float = 0.0, out_w_std: float = 0.01) -> None:
    add_lin_norm_act(store, f"{prefix}.hidden", c_in, hidden, rng)
    add_linear(store, f"{prefix}.out", hidden, c_out, rng, w_std=out_w_std, b_init=b_init)


def mlp_head(tp: TapeParams, prefix: str, x: ad.Tensor) -> ad.Tensor:
    return linear_out(tp, f"{prefix}.out", lin_norm_act(tp, f"{prefix}.hidden", x))
