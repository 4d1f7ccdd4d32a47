"""Multi-attribute classifier over pooled features and the activation-map
to bounding-box pipeline.

The classifier is one weight matrix per attribute applied to the spatial
sum of the last feature map. Its columns double as the per-class spatial
attention: the activation map for a class is the column-weighted sum of
feature channels, thresholded at 20% of its maximum, and the tight box
around the largest 4-connected region becomes the attribute's ROI.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .backbone import FeatureMaps
from .numerics import (
    GradientTape,
    Tensor,
    add_n,
    crop_and_resize,
    gap,
    matmul,
    mean_all,
    softmax_cross_entropy,
)
from .numerics import scale as scale_op
from .synthgen import AttributeSchema

THRESHOLD_FRACTION = 0.2
FULL_BOX = (0.0, 0.0, 1.0, 1.0)


def GAP_LOGIT_SCALE(h: int, w: int) -> float:
    """Constant folded out of the classifier weights so pooled-sum logits
    start at a trainable scale; activation maps are invariant to it."""
    return 1.0 / np.sqrt(h * w)


@dataclass(frozen=True)
class RoiBox:
    """Normalized [0, 1] bounding box; y1 <= y2 and x1 <= x2."""
    y1: float
    x1: float
    y2: float
    x2: float

    def __post_init__(self):
        for v in (self.y1, self.x1, self.y2, self.x2):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"box coordinate {v} outside [0, 1]")
        if self.y1 > self.y2 or self.x1 > self.x2:
            raise ValueError("box must satisfy y1 <= y2 and x1 <= x2")

    def as_array(self) -> np.ndarray:
        return np.array([self.y1, self.x1, self.y2, self.x2], dtype=np.float64)


@dataclass(frozen=True)
class AttributeActivationMap:
    attribute: int
    chosen_class: int
    heatmap: Tensor          # matches the last feature map's spatial shape


class GapClassifier:
    """One [K, values(a)] weight matrix per attribute (no bias, so columns
    are directly usable as activation-map weights).

    Logits are evaluated as (pooled / (h*w)) . w_a: the pooled features are
    spatial sums, and the 1/(h*w) normalization is the constant absorbed
    into the weights. Activation maps and their boxes are invariant to that
    scale (the segmentation threshold is relative to the map maximum).
    """

    def __init__(self, schema: AttributeSchema, tensors: Dict[str, Tensor]):
        self.schema = schema
        self.tensors = tensors

    @classmethod
    def init(cls, schema: AttributeSchema, feature_channels: int, seed: int
             ) -> "GapClassifier":
        # zero start: the first updates grow the weights from the pooled
        # features instead of starting from confident random predictions
        tensors = {}
        for name, values in schema.attributes:
            w = np.zeros((feature_channels, len(values)), dtype=np.float32)
            tensors[f"gap/{name}"] = Tensor(w)
        return cls(schema, tensors)

    def weight(self, attribute: int) -> Tensor:
        return self.tensors[f"gap/{self.schema.attributes[attribute][0]}"]

    def names(self) -> List[str]:
        return list(self.tensors)

    def with_tensors(self, tensors: Dict[str, Tensor]) -> "GapClassifier":
        merged = dict(self.tensors)
        merged.update({k: v for k, v in tensors.items() if k in merged})
        return GapClassifier(self.schema, merged)


def classification_loss(features: FeatureMaps, labels, classifier: GapClassifier,
                        tape: Optional[GradientTape] = None) -> Tensor:
    """Sum over attributes of cross-entropy on the pooled last map.

    ``labels``: (A,) for a single image or (N, A) for a batch; batches
    contribute their per-image average so the total is comparable across
    batch sizes.
    """
    labels = np.asarray(labels, dtype=np.int64)
    batched = features.last.ndim == 4
    h, w_sp = features.last.shape[-3], features.last.shape[-2]
    x = scale_op(gap(features.last, tape=tape), GAP_LOGIT_SCALE(h, w_sp), tape=tape)
    terms = []
    for a in range(classifier.schema.attribute_count):
        logits = matmul(x, classifier.weight(a), tape=tape)
        if batched:
            ce = softmax_cross_entropy(logits, labels[:, a], tape=tape)
            terms.append(mean_all(ce, tape=tape))
        else:
            terms.append(softmax_cross_entropy(logits, int(labels[a]), tape=tape))
    return add_n(terms, tape=tape)


def compute_aam(features: FeatureMaps, classifier: GapClassifier, a: int
                ) -> AttributeActivationMap:
    """Activation map for the most confident class of attribute ``a`` on a
    single image. Pure inference; boxes derived from it are constants."""
    last = features.last.array
    if last.ndim != 3:
        raise ValueError("compute_aam expects single-image features")
    w = classifier.weight(a).array
    x = last.sum(axis=(0, 1))
    c = int(np.argmax(x @ w))
    heat = last @ w[:, c]
    return AttributeActivationMap(attribute=a, chosen_class=c,
                                  heatmap=Tensor(heat.astype(np.float32)))


def batch_heatmaps(features: FeatureMaps, classifier: GapClassifier
                   ) -> np.ndarray:
    """(N, A, h, w) activation maps for a feature batch, one per attribute,
    each for the per-image most confident class."""
    last = features.last.array
    n = last.shape[0]
    x = last.sum(axis=(1, 2))
    maps = np.empty((n, classifier.schema.attribute_count) + last.shape[1:3],
                    dtype=np.float32)
    for a in range(classifier.schema.attribute_count):
        w = classifier.weight(a).array
        c = np.argmax(x @ w, axis=1)
        maps[:, a] = np.einsum("nhwk,nk->nhw", last, w[:, c].T)
    return maps


# ---------------------------------------------------------------------------
# threshold -> largest connected region -> box
# ---------------------------------------------------------------------------

def label_components(mask: np.ndarray) -> np.ndarray:
    """4-connected component labels (0 = background) via two-pass
    union-find; labels are compacted in first-cell row-major order."""
    h, w = mask.shape
    labels = np.zeros((h, w), dtype=np.int32)
    parent: List[int] = [0]

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    next_label = 1
    for r in range(h):
        for c in range(w):
            if not mask[r, c]:
                continue
            up = labels[r - 1, c] if r > 0 else 0
            left = labels[r, c - 1] if c > 0 else 0
            if up == 0 and left == 0:
                parent.append(next_label)
                labels[r, c] = next_label
                next_label += 1
            elif up == 0 or left == 0:
                labels[r, c] = max(up, left)
            else:
                a, b = find(up), find(left)
                labels[r, c] = min(a, b)
                if a != b:
                    parent[max(a, b)] = min(a, b)
    remap: Dict[int, int] = {}
    out = np.zeros_like(labels)
    for r in range(h):
        for c in range(w):
            if labels[r, c]:
                root = find(labels[r, c])
                if root not in remap:
                    remap[root] = len(remap) + 1
                out[r, c] = remap[root]
    return out


def threshold_bbox(aam: AttributeActivationMap) -> RoiBox:
    """Box around the largest connected region above 20% of the map's max.

    Non-positive maxima fall back to the full-image box so downstream
    pooling always has a valid region. Equal-size components tie-break to
    the one whose first cell comes earliest in row-major order.
    """
    heat = aam.heatmap.array
    h, w = heat.shape
    mx = float(heat.max())
    if mx <= 0.0:
        return RoiBox(*FULL_BOX)
    mask = heat > THRESHOLD_FRACTION * mx
    labels = label_components(mask)
    n_comp = labels.max()
    if n_comp == 0:
        return RoiBox(*FULL_BOX)
    sizes = np.bincount(labels.reshape(-1))[1:]
    best = int(np.argmax(sizes)) + 1   # argmax returns the first (lowest
    # label = earliest first cell) among equal-size components
    rows, cols = np.nonzero(labels == best)
    dy = max(h - 1, 1)
    dx = max(w - 1, 1)
    return RoiBox(rows.min() / dy, cols.min() / dx,
                  rows.max() / dy, cols.max() / dx)


def attribute_boxes(features: FeatureMaps, classifier: GapClassifier,
                    use_localization: bool = True) -> np.ndarray:
    """(A, 4) boxes for one image, or (N, A, 4) for a batch. Without
    localization every box is the full map."""
    a_count = classifier.schema.attribute_count
    if features.last.ndim == 3:
        if not use_localization:
            return np.tile(np.array(FULL_BOX), (a_count, 1))
        out = np.empty((a_count, 4))
        for a in range(a_count):
            out[a] = threshold_bbox(compute_aam(features, classifier, a)).as_array()
        return out
    n = features.last.shape[0]
    if not use_localization:
        return np.tile(np.array(FULL_BOX), (n, a_count, 1))
    maps = batch_heatmaps(features, classifier)
    out = np.empty((n, a_count, 4))
    for i in range(n):
        for a in range(a_count):
            aam = AttributeActivationMap(a, 0, Tensor(maps[i, a]))
            out[i, a] = threshold_bbox(aam).as_array()
    return out


# ---------------------------------------------------------------------------
# explainability export
# ---------------------------------------------------------------------------

def render_heatmap_png(aam: AttributeActivationMap, out_h: int, out_w: int
                       ) -> bytes:
    """8-bit grayscale PNG of the map, bilinearly upsampled to image size."""
    heat = aam.heatmap.array.astype(np.float32)[:, :, None]
    big = crop_and_resize(Tensor(heat), FULL_BOX, out_h, out_w).array[:, :, 0]
    lo, hi = float(big.min()), float(big.max())
    norm = (big - lo) / (hi - lo) if hi > lo else np.zeros_like(big)
    img = Image.fromarray(np.round(norm * 255).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def export_aam(features: FeatureMaps, classifier: GapClassifier, a: int,
               image_size: int) -> Tuple[dict, bytes]:
    """(JSON record, PNG bytes) for one image/attribute pair."""
    aam = compute_aam(features, classifier, a)
    box = threshold_bbox(aam)
    record = {
        "attribute": classifier.schema.attributes[a][0],
        "class": classifier.schema.values(a)[aam.chosen_class],
        "box": {"y1": box.y1, "x1": box.x1, "y2": box.y2, "x2": box.x2},
    }
    return record, render_heatmap_png(aam, image_size, image_size)
