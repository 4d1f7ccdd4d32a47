"""Per-attribute representation branches and the ranking losses.

Each attribute owns a two-layer fully connected branch fed by a 3x3
bilinear crop of the mid feature map inside that attribute's box
(optionally concatenated with a full-map crop when feature fusion is on).
Similarity is trained with the soft triplet formulation, which squashes
the anchor-positive / anchor-negative distance pair through a softmax so
the loss lives in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .backbone import FeatureMaps
from .localization import FULL_BOX
from .numerics import (
    GradientTape,
    Tensor,
    UsageError,
    add_n,
    bias_add,
    concat,
    crop_and_resize,
    dropout,
    flatten,
    matmul,
    mean_all,
    one_minus,
    relu,
    sigmoid,
    softmax_cross_entropy,
    square,
    stack,
    sub,
)
from .synthgen import AttributeSchema

ROI_POOL_SIZE = 3
DEFAULT_HIDDEN = 64
DEFAULT_DIM = 32


class SamplingError(UsageError):
    pass


@dataclass(frozen=True)
class TripletBatch:
    """Id triples for one attribute: anchor and positive share the
    attribute's label, the negative differs in it."""
    attribute: int
    triples: Tuple[Tuple[str, str, str], ...]

    def __post_init__(self):
        for a, p, n in self.triples:
            if a == p:
                raise SamplingError(f"anchor {a!r} equals its positive")


@dataclass(frozen=True)
class AttributeRepresentation:
    attribute: int
    vector: Tensor


class HeadBank:
    """fc branches plus the per-attribute linear classifiers used only for
    the head classification loss (discarded at retrieval time)."""

    def __init__(self, schema: AttributeSchema, tensors: Dict[str, Tensor],
                 pooled_len: int, hidden: int, dim: int, fusion: bool):
        self.schema = schema
        self.tensors = tensors
        self.pooled_len = pooled_len
        self.hidden = hidden
        self.dim = dim
        self.fusion = fusion

    @classmethod
    def init(cls, schema: AttributeSchema, mid_channels: int, seed: int,
             hidden: int = DEFAULT_HIDDEN, dim: int = DEFAULT_DIM,
             fusion: bool = False) -> "HeadBank":
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([seed, 0xE0])))
        pooled = ROI_POOL_SIZE * ROI_POOL_SIZE * mid_channels
        fc1_in = 2 * pooled if fusion else pooled
        tensors: Dict[str, Tensor] = {}
        for name, values in schema.attributes:
            tensors[f"head/{name}/fc1/weight"] = _gauss(rng, (fc1_in, hidden))
            tensors[f"head/{name}/fc1/bias"] = Tensor(np.zeros(hidden, np.float32))
            tensors[f"head/{name}/fc2/weight"] = _gauss(rng, (hidden, dim))
            tensors[f"head/{name}/fc2/bias"] = Tensor(np.zeros(dim, np.float32))
            tensors[f"head/{name}/classifier"] = _gauss(rng, (dim, len(values)))
        return cls(schema, tensors, pooled, hidden, dim, fusion)

    def names(self) -> List[str]:
        return list(self.tensors)

    def branch_names(self) -> List[str]:
        return [n for n in self.tensors if not n.endswith("classifier")]

    def with_tensors(self, tensors: Dict[str, Tensor]) -> "HeadBank":
        merged = dict(self.tensors)
        merged.update({k: v for k, v in tensors.items() if k in merged})
        return HeadBank(self.schema, merged, self.pooled_len, self.hidden,
                        self.dim, self.fusion)

    def _t(self, attribute: int, leaf: str) -> Tensor:
        name = self.schema.attributes[attribute][0]
        return self.tensors[f"head/{name}/{leaf}"]


def _gauss(rng, shape) -> Tensor:
    std = np.sqrt(2.0 / shape[0])
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32))


def attribute_representation(features: FeatureMaps, box, bank: HeadBank,
                             attribute: int,
                             tape: Optional[GradientTape] = None,
                             dropout_rng: Optional[np.random.Generator] = None,
                             keep_prob: float = 1.0) -> Tensor:
    """Pool the mid map inside ``box``, then fc1 -> relu -> dropout -> fc2.

    ``box``: one (4,) box for single-image features or (N, 4) for a batch.
    Dropout only applies while training (pass an rng and keep_prob < 1).
    Returns a (D,) vector or an (N, D) matrix.
    """
    batched = features.mid.ndim == 4
    pool = crop_and_resize(features.mid, box, ROI_POOL_SIZE, ROI_POOL_SIZE,
                           tape=tape)
    flat = flatten(pool, keep_batch=batched, tape=tape)
    if bank.fusion:
        full = _full_boxes(features.mid)
        whole = crop_and_resize(features.mid, full, ROI_POOL_SIZE,
                                ROI_POOL_SIZE, tape=tape)
        flat = concat([flat, flatten(whole, keep_batch=batched, tape=tape)],
                      tape=tape)
    h = bias_add(matmul(flat, bank._t(attribute, "fc1/weight"), tape=tape),
                 bank._t(attribute, "fc1/bias"), tape=tape)
    h = relu(h, tape=tape)
    if dropout_rng is not None and keep_prob < 1.0:
        h = dropout(h, keep_prob, dropout_rng, tape=tape)
    return bias_add(matmul(h, bank._t(attribute, "fc2/weight"), tape=tape),
                    bank._t(attribute, "fc2/bias"), tape=tape)


def _full_boxes(mid: Tensor):
    if mid.ndim == 3:
        return FULL_BOX
    return np.tile(np.array(FULL_BOX), (mid.shape[0], 1))


def soft_triplet(anchor: Tensor, positive: Tensor, negative: Tensor,
                 tape: Optional[GradientTape] = None) -> Tuple[Tensor, Tensor]:
    """Softmax-normalized distance pair (d_plus, d_minus), each in (0, 1)
    and summing to 1.

    d_plus = exp(|a-p|) / (exp(|a-p|) + exp(|a-n|)), computed stably as
    sigmoid(|a-p| - |a-n|). Accepts (D,) vectors or (N, D) batches.
    """
    from .numerics import l2_distance
    d_ap = l2_distance(anchor, positive, tape=tape)
    d_an = l2_distance(anchor, negative, tape=tape)
    d_plus = sigmoid(sub(d_ap, d_an, tape=tape), tape=tape)
    d_minus = one_minus(d_plus, tape=tape)
    return d_plus, d_minus


def ranking_loss(batches: Sequence[TripletBatch],
                 representations: Mapping[Tuple[int, str], Tensor],
                 tape: Optional[GradientTape] = None,
                 squared: bool = False) -> Tensor:
    """Sum over attributes of the mean d_plus across that attribute's
    triplets.

    ``representations`` maps (attribute, image id) to the attribute-branch
    output for that image. ``squared=True`` switches to d_plus**2, the
    variant suggested by the soft-triplet derivation.
    """
    terms = []
    for batch in batches:
        for ids in batch.triples:
            for image_id in ids:
                key = (batch.attribute, image_id)
                if key not in representations:
                    raise UsageError(f"missing representation for attribute "
                                     f"{batch.attribute}, image {image_id!r}")
        anchors = stack([representations[(batch.attribute, t[0])]
                         for t in batch.triples], tape=tape)
        positives = stack([representations[(batch.attribute, t[1])]
                           for t in batch.triples], tape=tape)
        negatives = stack([representations[(batch.attribute, t[2])]
                           for t in batch.triples], tape=tape)
        terms.append(triplet_term(anchors, positives, negatives, tape=tape,
                                  squared=squared))
    if not terms:
        raise UsageError("ranking_loss: no triplet batches")
    return add_n(terms, tape=tape)


def triplet_term(anchors: Tensor, positives: Tensor, negatives: Tensor,
                 tape: Optional[GradientTape] = None,
                 squared: bool = False) -> Tensor:
    """Mean d_plus over an (N, D) triplet batch (one attribute)."""
    d_plus, _ = soft_triplet(anchors, positives, negatives, tape=tape)
    if squared:
        return mean_all(square(d_plus, tape=tape), tape=tape)
    return mean_all(d_plus, tape=tape)


def head_classification_loss(representations: Mapping[int, Tensor], labels,
                             bank: HeadBank,
                             tape: Optional[GradientTape] = None) -> Tensor:
    """Sum over attributes of cross-entropy on the head outputs.

    ``representations``: attribute index -> (D,) vector or (N, D) batch;
    ``labels``: (A,) or (N, A) accordingly.
    """
    labels = np.asarray(labels, dtype=np.int64)
    terms = []
    for a in range(bank.schema.attribute_count):
        rep = representations[a]
        logits = matmul(rep, bank._t(a, "classifier"), tape=tape)
        if rep.ndim == 2:
            ce = softmax_cross_entropy(logits, labels[:, a], tape=tape)
            terms.append(mean_all(ce, tape=tape))
        else:
            terms.append(softmax_cross_entropy(logits, int(labels[a]), tape=tape))
    return add_n(terms, tape=tape)


def sample_triplets(labels_by_id: Mapping[str, Sequence[int]], attribute: int,
                    batch_size: int, seed_or_rng) -> TripletBatch:
    """Seeded triplet draw for one attribute: anchors uniform among images
    that have both a same-value partner and a different-value image;
    positive uniform among same-value images (excluding the anchor);
    negative uniform among different-value images."""
    rng = _as_rng(seed_or_rng)
    by_value: Dict[int, List[str]] = {}
    for image_id in sorted(labels_by_id):
        by_value.setdefault(int(labels_by_id[image_id][attribute]), []).append(image_id)
    values = sorted(by_value)
    if len(values) < 2 or not any(len(v) >= 2 for v in by_value.values()):
        raise SamplingError(
            f"attribute {attribute} lacks two values or a repeated value")
    eligible_values = [v for v in values if len(by_value[v]) >= 2]
    anchors_pool = [i for v in eligible_values for i in by_value[v]]
    triples = []
    for _ in range(batch_size):
        anchor = anchors_pool[int(rng.integers(0, len(anchors_pool)))]
        v = int(labels_by_id[anchor][attribute])
        same = by_value[v]
        while True:
            positive = same[int(rng.integers(0, len(same)))]
            if positive != anchor:
                break
        others = [i for u in values if u != v for i in by_value[u]]
        negative = others[int(rng.integers(0, len(others)))]
        triples.append((anchor, positive, negative))
    return TripletBatch(attribute=attribute, triples=tuple(triples))


def _as_rng(seed_or_rng) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(seed_or_rng), 0x7B])))
