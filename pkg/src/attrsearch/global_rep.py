"""Composition of per-attribute vectors into one global retrieval vector.

Every attribute slot is scaled by a learned importance weight, the slots
are concatenated, and the result is projected to dimension r by a matrix
chosen per manipulated attribute. A query's manipulated slot is replaced
by the memory retrieval g before composing; gallery images are composed
from their own unreplaced slots but projected by the query's matrix so
both sides live in the same space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .heads import soft_triplet
from .numerics import (
    DimensionError,
    GradientTape,
    Tensor,
    UsageError,
    matmul,
    weighted_concat,
)
from .synthgen import AttributeSchema

DEFAULT_GLOBAL_DIM = 32


@dataclass(frozen=True)
class GlobalRepresentation:
    vector: Tensor
    image_id: Optional[str] = None
    manipulated_attribute: Optional[int] = None


class GlobalParams:
    """Importance weights (one scalar per attribute) plus projection
    matrices of shape (A*D, r), one per manipulated attribute (or a single
    shared matrix when ``shared=True``)."""

    def __init__(self, schema: AttributeSchema, tensors: Dict[str, Tensor],
                 dim: int, r: int, shared: bool = False):
        self.schema = schema
        self.tensors = tensors
        self.dim = dim
        self.r = r
        self.shared = shared

    @classmethod
    def init(cls, schema: AttributeSchema, dim: int,
             r: int = DEFAULT_GLOBAL_DIM, seed: int = 0,
             shared: bool = False) -> "GlobalParams":
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, 0x61])))
        a = schema.attribute_count
        tensors: Dict[str, Tensor] = {
            "global/lambda": Tensor(np.ones(a, dtype=np.float32))}
        width = a * dim
        std = 1.0 / np.sqrt(width)
        if shared:
            tensors["global/proj/shared"] = Tensor(
                rng.normal(0.0, std, size=(width, r)).astype(np.float32))
        else:
            for name, _ in schema.attributes:
                tensors[f"global/proj/{name}"] = Tensor(
                    rng.normal(0.0, std, size=(width, r)).astype(np.float32))
        return cls(schema, tensors, dim, r, shared)

    @classmethod
    def identity(cls, schema: AttributeSchema, dim: int) -> "GlobalParams":
        """Unit weights and identity projections (r = A*D): composition is
        the plain concatenation. Used by the ladder variants that skip
        global training ("direct replacement")."""
        a = schema.attribute_count
        width = a * dim
        eye = Tensor(np.eye(width, dtype=np.float32))
        tensors = {"global/lambda": Tensor(np.ones(a, dtype=np.float32)),
                   "global/proj/shared": eye}
        return cls(schema, tensors, dim, width, shared=True)

    @property
    def lambdas(self) -> Tensor:
        return self.tensors["global/lambda"]

    def projection(self, attribute: int) -> Tensor:
        if self.shared:
            return self.tensors["global/proj/shared"]
        return self.tensors[f"global/proj/{self.schema.attributes[attribute][0]}"]

    def names(self) -> List[str]:
        return list(self.tensors)

    def with_tensors(self, tensors: Dict[str, Tensor]) -> "GlobalParams":
        merged = dict(self.tensors)
        merged.update({k: v for k, v in tensors.items() if k in merged})
        return GlobalParams(self.schema, merged, self.dim, self.r, self.shared)


def compose(reps: Sequence[Tensor],
            manipulation: Optional[Tuple[int, Tensor]],
            params: GlobalParams,
            project_as: Optional[int] = None,
            tape: Optional[GradientTape] = None,
            image_id: Optional[str] = None) -> GlobalRepresentation:
    """Scale-concatenate-project the A attribute slots.

    ``manipulation`` = (attribute index, replacement vector g) substitutes
    the slot before weighting. ``project_as`` picks the projection matrix
    when no manipulation is given (gallery side of a query); it defaults
    to the manipulated attribute.
    """
    a_count = params.schema.attribute_count
    if len(reps) != a_count:
        raise UsageError(f"compose: expected {a_count} representations, "
                         f"got {len(reps)}")
    slots = list(reps)
    manipulated = None
    if manipulation is not None:
        a_star, g = manipulation
        if not 0 <= a_star < a_count:
            raise UsageError(f"compose: attribute {a_star} out of range")
        if g.shape[-1] != params.dim:
            raise DimensionError(f"compose: g length {g.shape[-1]} != {params.dim}")
        slots[a_star] = g
        manipulated = a_star
        if project_as is None:
            project_as = a_star
    if project_as is None:
        if not params.shared:
            raise UsageError("compose: project_as required without a "
                             "manipulation (per-attribute projections)")
        project_as = 0
    merged = weighted_concat(slots, params.lambdas, tape=tape)
    vec = matmul(merged, params.projection(project_as), tape=tape)
    return GlobalRepresentation(vector=vec, image_id=image_id,
                                manipulated_attribute=manipulated)


def global_loss(f_query: GlobalRepresentation, f_positive: GlobalRepresentation,
                f_negative: GlobalRepresentation,
                tape: Optional[GradientTape] = None) -> Tensor:
    """d_plus on the composed triple; the positive matches the
    post-manipulation target exactly, the negative is anything else."""
    for f in (f_positive, f_negative):
        if f.vector.shape != f_query.vector.shape:
            raise DimensionError("global_loss: vector lengths differ")
    d_plus, _ = soft_triplet(f_query.vector, f_positive.vector,
                             f_negative.vector, tape=tape)
    return d_plus


@dataclass(frozen=True)
class GlobalTriplet:
    query_id: str
    attribute: int
    value: int
    positive_id: str
    negative_id: str


def sample_global_triplets(labels_by_id: Mapping[str, Sequence[int]],
                           schema: AttributeSchema, n: int, seed_or_rng,
                           max_retries: int = 64) -> List[GlobalTriplet]:
    """Draw (query, manipulation, positive, negative) tuples inside one id
    set: the positive's labels equal the query's with the manipulated
    attribute set to the target value; the negative is uniform among
    images not matching that target vector."""
    rng = seed_or_rng if isinstance(seed_or_rng, np.random.Generator) else \
        np.random.Generator(np.random.PCG64(np.random.SeedSequence(
            [int(seed_or_rng), 0x6B])))
    ids = sorted(labels_by_id)
    vectors = {i: tuple(int(v) for v in labels_by_id[i]) for i in ids}
    by_vector: Dict[Tuple[int, ...], List[str]] = {}
    for image_id in ids:
        by_vector.setdefault(vectors[image_id], []).append(image_id)
    out: List[GlobalTriplet] = []
    for _ in range(n):
        for attempt in range(max_retries):
            query_id = ids[int(rng.integers(0, len(ids)))]
            labels = vectors[query_id]
            options = []
            for a in range(schema.attribute_count):
                for v in range(len(schema.values(a))):
                    if v == labels[a]:
                        continue
                    target = labels[:a] + (v,) + labels[a + 1:]
                    if target in by_vector:
                        options.append((a, v, target))
            if options:
                break
        else:
            raise UsageError(f"no achievable manipulation after "
                             f"{max_retries} query draws")
        a, v, target = options[int(rng.integers(0, len(options)))]
        positives = by_vector[target]
        if len(positives) == len(ids):
            raise UsageError("every image matches the manipulation target; "
                             "no negative exists")
        positive_id = positives[int(rng.integers(0, len(positives)))]
        # rejection draw stays uniform over non-matching images and is
        # near-constant time because any one vector is rare
        while True:
            negative_id = ids[int(rng.integers(0, len(ids)))]
            if vectors[negative_id] != target:
                break
        out.append(GlobalTriplet(query_id, a, v, positive_id, negative_id))
    return out
