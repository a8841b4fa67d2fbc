"""Named parameter tensors, Adam, and checkpoints."""
from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from ..errors import FormatError, StructuralError
from ..io import read_blob, write_blob
from .tape import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ParamStore:
    """Ordered named float64 tensors with gradient buffers and Adam moments."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise StructuralError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    @property
    def n_params(self) -> int:
        return int(sum(v.size for v in self.values.values()))

    def leaves(self) -> dict[str, Tensor]:
        """Fresh gradient-tracking leaves over the current values."""
        return {k: Tensor(v, requires_grad=True, name=k) for k, v in self.values.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v, name=k) for k, v in self.values.items()}

    def collect(self, leaves: dict[str, Tensor]) -> None:
        for k, leaf in leaves.items():
            self.grads[k] = np.zeros_like(self.values[k]) if leaf.grad is None else leaf.grad

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values.values()]) if self.values else np.zeros(0)

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps_adam: float = 1e-8) -> bool:
        """One bias-corrected Adam update. Returns False (and skips) on non-finite gradients."""
        if not all(np.all(np.isfinite(g)) for g in self.grads.values()):
            log.warning("non-finite gradient at step %d; update skipped", self.step)
            return False
        self.step += 1
        c1 = 1.0 - beta1 ** self.step
        c2 = 1.0 - beta2 ** self.step
        for k, p in self.values.items():
            g = self.grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps_adam)
        return True

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k in self.values:
            out.add(k, self.values[k])
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        out.step = self.step
        return out

    # ------------------------------------------------------------ checkpoints

    def save(self, path, meta: Optional[dict] = None) -> None:
        arrays = dict(self.values)
        arrays.update({f"adam.m/{k}": v for k, v in self.m.items()})
        arrays.update({f"adam.v/{k}": v for k, v in self.v.items()})
        header = {"kind": "checkpoint", "checkpoint_version": CHECKPOINT_VERSION,
                  "names": list(self.values), "step": self.step, "meta": meta or {}}
        write_blob(path, header, arrays)

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        header, arrays = read_blob(path)
        if header.get("kind") != "checkpoint":
            raise FormatError(f"{path} is not a checkpoint")
        if header.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {header.get('checkpoint_version')}")
        store = cls()
        for k in header["names"]:
            store.add(k, arrays[k])
            store.m[k] = arrays[f"adam.m/{k}"].copy()
            store.v[k] = arrays[f"adam.v/{k}"].copy()
        store.step = int(header["step"])
        return store, header["meta"]


def adam_step(params: ParamStore, grads: dict, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps_adam: float = 1e-8) -> ParamStore:
    """Functional form: install ``grads`` and step ``params`` in place."""
    for k, g in grads.items():
        params.grads[k] = np.asarray(g, dtype=np.float64)
    params.adam_step(lr, beta1, beta2, eps_adam)
    return params
