"""Recording of non-differentiable decisions taken during a forward pass.

Rendering and the losses contain hard gates (support cutoff, opacity skip,
early termination, depth sorting, ReLU/abs kinks, visibility, bilinear
cell selection). Gradients are zero across these gates, so a finite
difference whose stencil straddles one is meaningless. Code paths report
each decision with :func:`gate`; the gradient checker compares the recorded
signatures at ``theta + h`` and ``theta - h`` and drops parameters for
which they differ.
"""
from __future__ import annotations

import contextlib
import contextvars
import hashlib
from typing import Optional

import numpy as np
import torch

_ACTIVE: contextvars.ContextVar["GateRecorder | None"] = contextvars.ContextVar("gates", default=None)


class GateRecorder:
    def __init__(self):
        self._hash = hashlib.sha1()
        self.names: list[str] = []
        self.digests: list[str] = []

    def add(self, name: str, value) -> None:
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(np.asarray(value))
        h = hashlib.sha1(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.astype(np.int64, copy=False).tobytes())
        self.names.append(name)
        self.digests.append(h.hexdigest())
        self._hash.update(h.digest())

    def signature(self) -> str:
        return self._hash.hexdigest()

    def first_difference(self, other: "GateRecorder") -> Optional[str]:
        """Name of the first gate whose decisions differ from ``other``."""
        for name, a, b in zip(self.names, self.digests, other.digests):
            if a != b:
                return name
        if len(self.digests) != len(other.digests):
            return "<gate count>"
        return None


def gate(name: str, value) -> None:
    """Record a discrete decision if a recorder is active (no-op otherwise)."""
    rec = _ACTIVE.get()
    if rec is not None:
        rec.add(name, value)


@contextlib.contextmanager
def record_gates():
    rec = GateRecorder()
    token = _ACTIVE.set(rec)
    try:
        yield rec
    finally:
        _ACTIVE.reset(token)
