"""Prototype attribute memory: one row per (attribute, value) pair.

Rows are the per-value means of trained head outputs over the training
set. A manipulation is a one-hot vector over rows; its target
representation is retrieved by the (differentiable) product g = t M, so
stage-3 training can refine the prototypes themselves when the block is
unfrozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .numerics import DimensionError, GradientTape, Tensor, UsageError, matmul
from .synthgen import AttributeSchema


class MissingPrototypeError(UsageError):
    """Some (attribute, value) pair never occurs in the training set."""

    def __init__(self, missing: Sequence[Tuple[str, str]]):
        self.missing = tuple(missing)
        pairs = ", ".join(f"{a}={v}" for a, v in self.missing)
        super().__init__(f"no training image for: {pairs}")


def row_index_for(schema: AttributeSchema) -> Dict[Tuple[int, int], int]:
    """Canonical row order: attributes in schema order, values in schema
    order. Fixed so indicator vectors mean the same thing after reloads."""
    index: Dict[Tuple[int, int], int] = {}
    row = 0
    for a, (_, values) in enumerate(schema.attributes):
        for v in range(len(values)):
            index[(a, v)] = row
            row += 1
    return index


@dataclass(frozen=True)
class MemoryBlock:
    schema: AttributeSchema
    matrix: Tensor                          # C x D
    trainable: bool = False

    def __post_init__(self):
        c = self.schema.total_value_count
        if self.matrix.ndim != 2 or self.matrix.shape[0] != c:
            raise DimensionError(
                f"memory matrix {self.matrix.shape} does not have "
                f"{c} rows")

    @property
    def row_index(self) -> Dict[Tuple[int, int], int]:
        return row_index_for(self.schema)

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, attribute: int, value: int) -> np.ndarray:
        return self.matrix.array[self.row_index[(attribute, value)]]

    def indicator(self, attribute: int, value: int) -> np.ndarray:
        """One-hot manipulation vector addressing (attribute, value)."""
        t = np.zeros(self.rows, dtype=np.float32)
        t[self.row_index[(attribute, value)]] = 1.0
        return t

    def with_matrix(self, matrix: Tensor) -> "MemoryBlock":
        return MemoryBlock(self.schema, matrix, self.trainable)

    def row_index_json(self) -> list:
        names = self.schema.attributes
        return [{"attribute": names[a][0], "value": names[a][1][v], "row": r}
                for (a, v), r in sorted(self.row_index.items(),
                                        key=lambda kv: kv[1])]


def build_memory(schema: AttributeSchema,
                 labeled_representations: Iterable[Tuple[Sequence[int], np.ndarray]],
                 ) -> MemoryBlock:
    """Average the (A, D) per-image representation stacks by label.

    Each item pairs an image's label vector with its stacked attribute
    representations. Every (attribute, value) pair must occur at least
    once; missing pairs raise with the full list.
    """
    index = row_index_for(schema)
    sums: Optional[np.ndarray] = None
    counts = np.zeros(len(index), dtype=np.int64)
    for labels, reps in labeled_representations:
        reps = np.asarray(reps, dtype=np.float64)
        if sums is None:
            sums = np.zeros((len(index), reps.shape[1]), dtype=np.float64)
        for a, v in enumerate(labels):
            r = index[(a, int(v))]
            sums[r] += reps[a]
            counts[r] += 1
    if sums is None:
        raise UsageError("build_memory: empty training set")
    if (counts == 0).any():
        missing = []
        for (a, v), r in index.items():
            if counts[r] == 0:
                missing.append((schema.attributes[a][0], schema.values(a)[v]))
        raise MissingPrototypeError(sorted(missing))
    matrix = (sums / counts[:, None]).astype(np.float32)
    return MemoryBlock(schema=schema, matrix=Tensor(matrix))


def retrieve(memory: MemoryBlock, t, tape: Optional[GradientTape] = None
             ) -> Tensor:
    """g = t M. With a tape and a trainable block, gradients reach the
    addressed rows; a frozen block contributes no gradient."""
    t_arr = np.asarray(t.array if isinstance(t, Tensor) else t)
    if t_arr.shape != (memory.rows,):
        raise DimensionError(f"indicator shape {t_arr.shape} != ({memory.rows},)")
    t_tensor = t if isinstance(t, Tensor) else Tensor(
        t_arr.astype(memory.matrix.dtype, copy=False), dtype=memory.matrix.dtype)
    if memory.trainable and tape is not None:
        return matmul(t_tensor, memory.matrix, tape=tape)
    return Tensor._wrap(t_arr.astype(memory.matrix.dtype) @ memory.matrix.array)


def freeze(memory: MemoryBlock) -> MemoryBlock:
    return MemoryBlock(memory.schema, memory.matrix, trainable=False)


def unfreeze(memory: MemoryBlock) -> MemoryBlock:
    return MemoryBlock(memory.schema, memory.matrix, trainable=True)
