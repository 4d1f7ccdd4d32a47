"""Gallery indexing, Euclidean top-K retrieval, and the hit-rate harness.

The index stores, per gallery image, its attribute representations and one
precomputed projected vector per possible manipulated attribute (gallery
images are composed from their own slots; the query's projection matrix is
what varies). Queries are exact brute-force scans; distances are compared
as squared Euclidean, which sorts identically.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .global_rep import compose
from .memory import retrieve
from .model import Model
from .numerics import Tensor, UsageError, load_tensors, save_tensors
from .synthgen import LabeledImage, manipulations_available

INDEX_FORMAT = "attrsearch-gallery-index-v1 (squared euclidean distances)"


@dataclass(frozen=True)
class GalleryIndex:
    ids: Tuple[str, ...]
    labels: np.ndarray          # (G, A) int64
    reps: np.ndarray            # (G, A, D) float32
    projected: np.ndarray       # (G, A, r) float32; axis 1 = manipulated attr
    version_tag: str            # checkpoint tag this index was built from

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class QueryResult:
    ids: Tuple[str, ...]
    distances: Tuple[float, ...]        # squared euclidean, nondecreasing
    target_labels: Tuple[int, ...]
    hits: Tuple[bool, ...]

    def hit_positions(self) -> List[int]:
        return [i for i, h in enumerate(self.hits) if h]


def index_gallery(images: Sequence[LabeledImage], model: Model,
                  version_tag: str = "") -> GalleryIndex:
    """Deterministic pass over the gallery: features, boxes, per-attribute
    representations, and the A projected composition vectors per image."""
    a_count = model.schema.attribute_count
    g = len(images)
    reps = model.representations(list(images)) if g else \
        np.zeros((0, a_count, model.heads.dim), dtype=np.float32)
    projected = np.zeros((g, a_count, model.global_params.r), dtype=np.float32)
    for i in range(g):
        slots = [Tensor(reps[i, a]) for a in range(a_count)]
        for a_star in range(a_count):
            projected[i, a_star] = compose(
                slots, None, model.global_params, project_as=a_star
            ).vector.array
    labels = np.array([im.labels for im in images], dtype=np.int64).reshape(
        g, a_count)
    return GalleryIndex(ids=tuple(im.id for im in images), labels=labels,
                        reps=reps, projected=projected,
                        version_tag=version_tag)


def query_vector(model: Model, reps: np.ndarray, attribute: int, value: int
                 ) -> np.ndarray:
    """Projected query vector with the manipulated slot replaced by the
    memory retrieval for (attribute, value)."""
    if model.memory is None:
        raise UsageError("model has no memory block; run training first")
    t = model.memory.indicator(attribute, value)
    g_vec = retrieve(model.memory, t)
    slots = [Tensor(reps[a]) for a in range(model.schema.attribute_count)]
    composed = compose(slots, (attribute, g_vec), model.global_params)
    return composed.vector.array


def query_from_reps(index: GalleryIndex, model: Model, reps: np.ndarray,
                    query_labels: Sequence[int], manipulation: Tuple[int, int],
                    k: int) -> QueryResult:
    a_star, v = manipulation
    values = model.schema.values(a_star)
    if not 0 <= v < len(values):
        raise UsageError(f"value {v} out of range for attribute {a_star}")
    if int(query_labels[a_star]) == v:
        raise UsageError("manipulation target equals the current value")
    fq = query_vector(model, reps, a_star, v).astype(np.float64)
    gallery = index.projected[:, a_star, :].astype(np.float64)
    d = gallery - fq[None, :]
    # the scan runs at 64 bits so orderings are reproducible against an
    # exact-summation oracle even for near-tied entries
    dists = np.einsum("gr,gr->g", d, d)
    order = np.lexsort((np.array(index.ids), dists))
    top = order[:max(k, 0)]
    target = list(int(x) for x in query_labels)
    target[a_star] = v
    target_t = tuple(target)
    hits = tuple(bool((index.labels[i] == np.array(target_t)).all()) for i in top)
    return QueryResult(ids=tuple(index.ids[i] for i in top),
                       distances=tuple(float(dists[i]) for i in top),
                       target_labels=target_t, hits=hits)


def query(index: GalleryIndex, model: Model, image: LabeledImage,
          manipulation: Tuple[int, int], k: int) -> QueryResult:
    """Top-K gallery matches for "this image with one attribute changed".

    Ranking is the exhaustive squared-distance scan over the gallery's
    vectors projected for the manipulated attribute, ties broken by id.
    """
    reps = model.representations(image)
    return query_from_reps(index, model, reps, image.labels, manipulation, k)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalTable:
    """Top-K accuracy per manipulated attribute (plus macro average),
    for each requested K."""
    ks: Tuple[int, ...]
    attribute_names: Tuple[str, ...]
    accuracy: Dict[int, Dict[str, float]]     # k -> {attr or "avg": value}
    counts: Dict[str, int]                    # manipulations per attribute

    def row(self, k: int) -> List[float]:
        return [self.accuracy[k][a] for a in self.attribute_names] + \
            [self.accuracy[k]["avg"]]


def evaluate(index: GalleryIndex, model: Model,
             queries: Sequence[LabeledImage], ks: Sequence[int]) -> EvalTable:
    """Every query image tries every manipulation that has an exact target
    in the gallery; a hit needs ALL attributes of a retrieved image to
    match the post-manipulation target."""
    ks = tuple(sorted(int(k) for k in ks))
    if not ks:
        raise UsageError("evaluate: need at least one K")
    kmax = ks[-1]
    names = tuple(model.schema.attribute_names())
    hit_sums = {k: np.zeros(len(names), dtype=np.int64) for k in ks}
    counts = np.zeros(len(names), dtype=np.int64)
    gallery_labels = [tuple(int(x) for x in row) for row in index.labels]
    all_reps = model.representations(list(queries)) if len(queries) else None
    for qi, im in enumerate(queries):
        for a, v in manipulations_available(im, gallery_labels):
            result = query_from_reps(index, model, all_reps[qi], im.labels,
                                     (a, v), kmax)
            counts[a] += 1
            for k in ks:
                if any(result.hits[:k]):
                    hit_sums[k][a] += 1
    accuracy: Dict[int, Dict[str, float]] = {}
    for k in ks:
        per = {}
        for a, name in enumerate(names):
            per[name] = float(hit_sums[k][a] / counts[a]) if counts[a] else 0.0
        per["avg"] = float(np.mean([per[n] for n in names]))
        accuracy[k] = per
    return EvalTable(ks=ks, attribute_names=names, accuracy=accuracy,
                     counts={n: int(counts[a]) for a, n in enumerate(names)})


def eval_table_csv(table: EvalTable) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k"] + list(table.attribute_names) + ["avg"])
    for k in table.ks:
        writer.writerow([k] + [f"{v:.6f}" for v in table.row(k)])
    return buf.getvalue()


def eval_table_json(table: EvalTable) -> str:
    return json.dumps({
        "ks": list(table.ks),
        "attributes": list(table.attribute_names),
        "accuracy": {str(k): table.accuracy[k] for k in table.ks},
        "manipulation_counts": table.counts,
    }, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# on-disk index
# ---------------------------------------------------------------------------

def save_index(path, index: GalleryIndex) -> None:
    path = Path(path)
    tensors = {
        "index/labels": index.labels.astype(np.float32),
        "index/reps": index.reps,
        "index/projected": index.projected,
    }
    save_tensors(path, tensors)
    sidecar = {
        "format": INDEX_FORMAT,
        "ids": list(index.ids),
        "labels": [list(map(int, row)) for row in index.labels],
        "version_tag": index.version_tag,
    }
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def load_index(path) -> GalleryIndex:
    path = Path(path)
    arrays = load_tensors(path)
    doc = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return GalleryIndex(
        ids=tuple(doc["ids"]),
        labels=np.array(doc["labels"], dtype=np.int64).reshape(
            len(doc["ids"]), -1),
        reps=arrays["index/reps"],
        projected=arrays["index/projected"],
        version_tag=doc["version_tag"],
    )
