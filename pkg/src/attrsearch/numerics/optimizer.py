"""Plain stochastic gradient descent, the only update rule the model uses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, Mapping

import numpy as np

from .tensor import Tensor, UsageError


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.01
    dropout_keep_probability: float = 0.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise UsageError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.dropout_keep_probability <= 1.0:
            raise UsageError("dropout_keep_probability must lie in (0, 1]")


def sgd_step(params: Mapping[str, Tensor],
             grads: Mapping[str, np.ndarray],
             learning_rate: float,
             only: Iterable[str] | None = None) -> Dict[str, Tensor]:
    """One descent step: new params for every name in ``grads`` (optionally
    restricted to ``only``); untouched entries are passed through."""
    names = set(grads) if only is None else set(only)
    out: Dict[str, Tensor] = {}
    for name, t in params.items():
        if name in names and name in grads:
            g = np.asarray(grads[name], dtype=t.dtype)
            if g.shape != t.shape:
                raise UsageError(f"gradient shape {g.shape} != parameter "
                                 f"shape {t.shape} for {name!r}")
            out[name] = Tensor._wrap(t.array - learning_rate * g)
        else:
            out[name] = t
    return out
