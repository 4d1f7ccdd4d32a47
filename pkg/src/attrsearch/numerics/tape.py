"""Reverse-mode gradient accumulation over an explicit operation tape."""

from __future__ import annotations

from typing import Dict, Mapping

import numpy as np

from .tensor import Tensor, UsageError


class TapeGradients:
    """Result of a backward pass: gradients per registered parameter, plus
    lookup for any tensor that participated in the computation."""

    def __init__(self, by_name: Dict[str, np.ndarray], by_uid: Dict[int, np.ndarray]):
        self.by_name = by_name
        self._by_uid = by_uid

    def __getitem__(self, name: str) -> np.ndarray:
        return self.by_name[name]

    def wrt(self, tensor: Tensor) -> np.ndarray:
        """Gradient with respect to an arbitrary tensor (zeros if the loss
        does not depend on it)."""
        g = self._by_uid.get(tensor.uid)
        if g is None:
            return np.zeros(tensor.shape, dtype=tensor.dtype)
        return g


class GradientTape:
    """Ordered record of executed operations with a parameter registry.

    Ops append themselves in execution order; ``backward`` replays the
    records in exact reverse order, accumulating vector-Jacobian products.
    A tape is single-threaded; build a fresh one per training step.
    """

    def __init__(self):
        self._records = []          # (out_uid, ((input_tensor, vjp), ...))
        self._produced = set()
        self._params: Dict[str, Tensor] = {}

    # -- parameter registry -------------------------------------------------

    def register_parameter(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise UsageError(f"parameter {name!r} already registered")
        self._params[name] = tensor
        return tensor

    def register_parameters(self, params: Mapping[str, Tensor]) -> None:
        for name, tensor in params.items():
            self.register_parameter(name, tensor)

    @property
    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    # -- recording and replay ------------------------------------------------

    def _record(self, out: Tensor, pairs) -> None:
        self._records.append((out.uid, tuple(pairs)))
        self._produced.add(out.uid)

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: Tensor) -> TapeGradients:
        """Accumulate d(loss)/d(tensor) for everything reachable backward
        from ``loss``. Registered parameters the loss never touched get
        zero gradients of matching shape."""
        if loss.size != 1:
            raise UsageError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss.uid not in self._produced:
            raise UsageError("backward: loss was not produced on this tape")
        grads: Dict[int, np.ndarray] = {
            loss.uid: np.ones(loss.shape, dtype=loss.dtype)}
        for out_uid, pairs in reversed(self._records):
            g = grads.get(out_uid)
            if g is None:
                continue
            for tensor, vjp in pairs:
                contrib = vjp(g)
                if contrib.shape != tensor.shape:
                    raise UsageError(
                        f"vjp produced shape {contrib.shape} for input of "
                        f"shape {tensor.shape}")
                acc = grads.get(tensor.uid)
                grads[tensor.uid] = contrib if acc is None else acc + contrib
        by_name = {}
        for name, t in self._params.items():
            g = grads.get(t.uid)
            by_name[name] = np.zeros(t.shape, dtype=t.dtype) if g is None \
                else g.astype(t.dtype, copy=False)
        return TapeGradients(by_name, grads)
