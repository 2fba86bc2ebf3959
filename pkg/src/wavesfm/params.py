"""Named parameter collections."""

from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Ordered map of dot-separated names to parameter tensors.

    Iteration follows insertion order, which fixes the traversal order of
    every training-loop reduction and therefore the bit pattern of a run.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(np.asarray(tensor), requires_grad=True)
        self._params[name] = tensor
        return tensor

    def merge(self, other: "ParameterStore"):
        for name, t in other.items():
            self.add(name, t)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def subset(self, pred) -> "ParameterStore":
        """A view (shared tensors) of the parameters whose name passes pred."""
        out = ParameterStore()
        for name, t in self._params.items():
            if pred(name):
                out.add(name, t)
        return out

    def count(self, pred=None) -> int:
        return sum(t.data.size for name, t in self._params.items()
                   if pred is None or pred(name))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def set_trainable(self, pred):
        """Set requires_grad per name; returns the trainable name list."""
        trainable = []
        for name, t in self._params.items():
            t.requires_grad = bool(pred(name))
            if t.requires_grad:
                trainable.append(name)
            else:
                t.grad = None
        return trainable

    def state_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_state_dict(self, state: dict):
        for name, arr in state.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter: {name}")
            t = self._params[name]
            if t.data.shape != arr.shape:
                raise ValueError(
                    f"shape mismatch for {name}: have {t.data.shape}, got {arr.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)

    def checksum(self, pred=None) -> str:
        """SHA-256 over names and raw bytes; detects any parameter change."""
        h = hashlib.sha256()
        for name, t in self._params.items():
            if pred is not None and not pred(name):
                continue
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()
