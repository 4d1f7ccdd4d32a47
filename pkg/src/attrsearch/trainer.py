"""Three-stage training: classification first (so activation maps become
reliable), then joint classification + triplet ranking for the attribute
branches, then global composition training on frozen local features.

Variants along the ablation ladder gate each mechanism:

    woRank   classification only; memory filled from untrained branches,
             retrieval by direct replacement in the concatenation space
    Rank     + triplet ranking, full-map pooling
    RankL    + activation-map localization
    RankLG   + global composition training, memory frozen
    Full     memory rows updated during stage 3
    FullFF   + feature fusion (localized and whole-map crops concatenated)
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .backbone import BackboneConfig, extract_features, init_backbone, stack_pixels
from .engine import EvalTable, evaluate, index_gallery
from .global_rep import GlobalParams, GlobalTriplet, compose, global_loss, sample_global_triplets
from .heads import (
    HeadBank,
    TripletBatch,
    attribute_representation,
    head_classification_loss,
    triplet_term,
)
from .localization import GAP_LOGIT_SCALE, GapClassifier, attribute_boxes
from .memory import MemoryBlock, build_memory, retrieve, unfreeze
from .model import Model
from .numerics import (
    GradientTape,
    Tensor,
    UsageError,
    add_n,
    gap,
    matmul,
    mean_all,
    scale,
    sgd_step,
    softmax_cross_entropy,
    take_rows,
)
from .synthgen import AttributeSchema, DatasetSplit, LabeledImage, load_dataset


@dataclass(frozen=True)
class LossWeights:
    """Term weights of the joint objective (stage-2 defaults)."""
    classification: float = 1.0
    triplet: float = 1.5
    head_classification: float = 1.0
    global_ranking: float = 0.0

    def __post_init__(self):
        for v in (self.classification, self.triplet,
                  self.head_classification, self.global_ranking):
            if v < 0:
                raise UsageError("loss weights must be nonnegative")


VARIANT_LADDER = ("woRank", "Rank", "RankL", "RankLG", "Full", "FullFF")


@dataclass(frozen=True)
class VariantConfig:
    name: str
    use_triplet: bool
    use_localization: bool
    use_global_training: bool
    memory_trainable: bool
    feature_fusion: bool

    @classmethod
    def from_name(cls, name: str) -> "VariantConfig":
        try:
            i = VARIANT_LADDER.index(name)
        except ValueError:
            raise UsageError(f"unknown variant {name!r}; choose from "
                             f"{VARIANT_LADDER}") from None
        return cls(name=name, use_triplet=i >= 1, use_localization=i >= 2,
                   use_global_training=i >= 3, memory_trainable=i >= 4,
                   feature_fusion=i >= 5)


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 12
    epochs_stage2: int = 12
    epochs_stage3: int = 2
    batch_size: int = 32
    learning_rate: float = 0.01
    dropout_keep_probability: float = 0.5
    head_hidden: int = 64
    rep_dim: int = 32
    global_dim: int = 32
    loss_weights: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    freeze_aams_after_stage1: bool = False
    shared_projection: bool = False
    squared_triplet: bool = False
    stage3_triplets_per_epoch: Optional[int] = None
    eval_ks: Tuple[int, ...] = (10, 20, 30)
    evaluate_after: bool = True

    def to_json_dict(self) -> dict:
        doc = {k: getattr(self, k) for k in (
            "epochs_stage1", "epochs_stage2", "epochs_stage3", "batch_size",
            "learning_rate", "dropout_keep_probability", "head_hidden",
            "rep_dim", "global_dim", "freeze_aams_after_stage1",
            "shared_projection", "squared_triplet",
            "stage3_triplets_per_epoch", "evaluate_after")}
        doc["eval_ks"] = list(self.eval_ks)
        doc["loss_weights"] = {
            "classification": self.loss_weights.classification,
            "triplet": self.loss_weights.triplet,
            "head_classification": self.loss_weights.head_classification,
            "global_ranking": self.loss_weights.global_ranking,
        }
        doc["backbone"] = self.backbone.to_json_dict()
        return doc


@dataclass
class TrainReport:
    seed: int
    variant: str
    config: dict
    notes: List[str] = field(default_factory=list)
    curves: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    stage_seconds: Dict[str, float] = field(default_factory=dict)
    evaluation: Optional[EvalTable] = None


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _rng(*entropy) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence([int(e) for e in entropy])))


def _load(data):
    if isinstance(data, (str, Path)):
        schema, images, ds = load_dataset(data)
    else:
        schema, images, ds = data
    if ds is None:
        raise UsageError("dataset has no train/query/gallery split")
    by_id = {im.id: im for im in images}
    return schema, by_id, ds


def _channel_means(images: Sequence[LabeledImage]) -> np.ndarray:
    total = np.zeros(3, dtype=np.float64)
    count = 0
    for im in images:
        total += im.pixels.array.reshape(-1, 3).sum(axis=0)
        count += im.pixels.array.shape[0] * im.pixels.array.shape[1]
    return (total / max(count, 1)).astype(np.float32)


def _ordered_unique(ids: Sequence[str]) -> List[str]:
    seen = {}
    for i in ids:
        if i not in seen:
            seen[i] = len(seen)
    return list(seen)


def triplets_for_anchors(labels_by_id, anchors: Sequence[str], attribute: int,
                         rng: np.random.Generator) -> TripletBatch:
    """Up to one triplet per anchor for one attribute; anchors without a
    same-value partner are skipped."""
    by_value: Dict[int, List[str]] = {}
    for image_id in sorted(labels_by_id):
        by_value.setdefault(int(labels_by_id[image_id][attribute]),
                            []).append(image_id)
    values = sorted(by_value)
    triples = []
    for anchor in anchors:
        v = int(labels_by_id[anchor][attribute])
        same = by_value[v]
        others = [i for u in values if u != v for i in by_value[u]]
        if len(same) < 2 or not others:
            continue
        while True:
            positive = same[int(rng.integers(0, len(same)))]
            if positive != anchor:
                break
        negative = others[int(rng.integers(0, len(others)))]
        triples.append((anchor, positive, negative))
    return TripletBatch(attribute=attribute, triples=tuple(triples))


class _TrainState:
    """Mutable parameter bag for the staged loops."""

    def __init__(self, schema: AttributeSchema, cfg: TrainConfig,
                 variant: VariantConfig, seed: int):
        self.schema = schema
        self.cfg = cfg
        self.variant = variant
        self.backbone = init_backbone(seed, cfg.backbone)
        k_last = cfg.backbone.layers[cfg.backbone.last_layer].channels
        self.classifier = GapClassifier.init(schema, k_last, seed)
        mid_channels = cfg.backbone.layers[cfg.backbone.mid_layer].channels
        self.heads = HeadBank.init(schema, mid_channels, seed,
                                   hidden=cfg.head_hidden, dim=cfg.rep_dim,
                                   fusion=variant.feature_fusion)
        if variant.use_global_training:
            self.global_params = GlobalParams.init(
                schema, cfg.rep_dim, r=cfg.global_dim, seed=seed,
                shared=cfg.shared_projection)
        else:
            self.global_params = GlobalParams.identity(schema, cfg.rep_dim)
        self.memory: Optional[MemoryBlock] = None
        # box source for stage 2; replaced by a frozen snapshot when the
        # freeze flag is set
        self.aam_backbone = None
        self.aam_classifier = None

    def model(self) -> Model:
        return Model(schema=self.schema, backbone=self.backbone,
                     classifier=self.classifier, heads=self.heads,
                     memory=self.memory, global_params=self.global_params,
                     use_localization=self.variant.use_localization,
                     variant=self.variant.name)

    def all_stage2_params(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        params.update({n: self.backbone.tensors[n]
                       for n in self.backbone.trainable_names()})
        params.update(self.classifier.tensors)
        params.update(self.heads.tensors)
        return params

    def apply_updates(self, params: Dict[str, Tensor]) -> None:
        self.backbone = self.backbone.with_tensors(params)
        self.classifier = self.classifier.with_tensors(params)
        self.heads = self.heads.with_tensors(params)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _stage1(state: _TrainState, train_ids, by_id, report: TrainReport) -> None:
    cfg = state.cfg
    rng = _rng(report.seed, 1)
    curve: List[float] = []
    for epoch in range(cfg.epochs_stage1):
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            tape = GradientTape()
            params = {}
            params.update({n: state.backbone.tensors[n]
                           for n in state.backbone.trainable_names()})
            params.update(state.classifier.tensors)
            tape.register_parameters(params)
            feats = extract_features(stack_pixels([by_id[i] for i in batch]),
                                     state.backbone, tape=tape)
            labels = np.array([by_id[i].labels for i in batch])
            loss = _classification_term(feats, labels, state.classifier, tape)
            grads = tape.backward(loss)
            updated = sgd_step(params, grads.by_name, cfg.learning_rate)
            state.apply_updates(updated)
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
    report.curves.setdefault("stage1", {})["classification"] = curve


def _classification_term(feats, labels, classifier, tape) -> Tensor:
    h, w_sp = feats.last.shape[-3], feats.last.shape[-2]
    x = scale(gap(feats.last, tape=tape), GAP_LOGIT_SCALE(h, w_sp), tape=tape)
    terms = []
    for a in range(classifier.schema.attribute_count):
        logits = matmul(x, classifier.weight(a), tape=tape)
        ce = softmax_cross_entropy(logits, labels[:, a], tape=tape)
        terms.append(mean_all(ce, tape=tape))
    return add_n(terms, tape=tape)


def _stage2(state: _TrainState, train_ids, by_id, report: TrainReport) -> None:
    cfg = state.cfg
    rng = _rng(report.seed, 2)
    dropout_rng = _rng(report.seed, 0xD0)
    labels_by_id = {i: by_id[i].labels for i in train_ids}
    curves = {"classification": [], "triplet": [], "head_classification": [],
              "joint": []}
    if cfg.freeze_aams_after_stage1:
        state.aam_backbone = state.backbone
        state.aam_classifier = state.classifier
    for epoch in range(cfg.epochs_stage2):
        order = [train_ids[i] for i in rng.permutation(len(train_ids))]
        sums = {k: 0.0 for k in curves}
        steps = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            values = _stage2_step(state, batch, labels_by_id, by_id, rng,
                                  dropout_rng)
            for k in sums:
                sums[k] += values[k]
            steps += 1
        for k in curves:
            curves[k].append(sums[k] / max(steps, 1))
    report.curves["stage2"] = curves


def _stage2_step(state: _TrainState, batch: List[str], labels_by_id, by_id,
                 rng, dropout_rng) -> Dict[str, float]:
    cfg = state.cfg
    w = cfg.loss_weights
    a_count = state.schema.attribute_count

    trip_batches = [triplets_for_anchors(labels_by_id, batch, a, rng)
                    for a in range(a_count)]
    ids = list(batch)
    for tb in trip_batches:
        for t in tb.triples:
            ids.extend(t)
    unique = _ordered_unique(ids)
    pos_of = {i: p for p, i in enumerate(unique)}

    tape = GradientTape()
    params = state.all_stage2_params()
    tape.register_parameters(params)
    feats = extract_features(stack_pixels([by_id[i] for i in unique]),
                             state.backbone, tape=tape)
    boxes = _stage2_boxes(state, unique, by_id, feats)

    anchor_rows = [pos_of[i] for i in batch]
    anchor_labels = np.array([by_id[i].labels for i in batch])

    # L_C on the anchor rows of the pooled last map
    h_sp, w_sp = feats.last.shape[-3], feats.last.shape[-2]
    x = scale(gap(feats.last, tape=tape), GAP_LOGIT_SCALE(h_sp, w_sp), tape=tape)
    x_anchor = take_rows(x, anchor_rows, tape=tape)
    c_terms = []
    for a in range(a_count):
        logits = matmul(x_anchor, state.classifier.weight(a), tape=tape)
        ce = softmax_cross_entropy(logits, anchor_labels[:, a], tape=tape)
        c_terms.append(mean_all(ce, tape=tape))
    l_c = add_n(c_terms, tape=tape)

    # attribute branches over the unique set (dropout active)
    reps = {}
    for a in range(a_count):
        reps[a] = attribute_representation(
            feats, boxes[:, a], state.heads, a, tape=tape,
            dropout_rng=dropout_rng,
            keep_prob=cfg.dropout_keep_probability)

    t_terms = []
    for a, tb in enumerate(trip_batches):
        if not tb.triples:
            continue
        anchors = take_rows(reps[a], [pos_of[t[0]] for t in tb.triples], tape=tape)
        positives = take_rows(reps[a], [pos_of[t[1]] for t in tb.triples], tape=tape)
        negatives = take_rows(reps[a], [pos_of[t[2]] for t in tb.triples], tape=tape)
        t_terms.append(triplet_term(anchors, positives, negatives, tape=tape,
                                    squared=cfg.squared_triplet))
    l_t = add_n(t_terms, tape=tape) if t_terms else None

    anchor_reps = {a: take_rows(reps[a], anchor_rows, tape=tape)
                   for a in range(a_count)}
    l_tc = head_classification_loss(anchor_reps, anchor_labels, state.heads,
                                    tape=tape)

    terms = [scale(l_c, w.classification, tape=tape),
             scale(l_tc, w.head_classification, tape=tape)]
    if l_t is not None:
        terms.append(scale(l_t, w.triplet, tape=tape))
    joint = add_n(terms, tape=tape)

    grads = tape.backward(joint)
    state.apply_updates(sgd_step(params, grads.by_name, cfg.learning_rate))
    return {
        "classification": l_c.item(),
        "triplet": l_t.item() if l_t is not None else 0.0,
        "head_classification": l_tc.item(),
        "joint": joint.item(),
    }


def _stage2_boxes(state: _TrainState, unique, by_id, feats) -> np.ndarray:
    if not state.variant.use_localization:
        return attribute_boxes(feats, state.classifier, use_localization=False)
    if state.aam_backbone is not None:
        frozen_feats = extract_features(
            stack_pixels([by_id[i] for i in unique]), state.aam_backbone)
        return attribute_boxes(frozen_feats, state.aam_classifier,
                               use_localization=True)
    return attribute_boxes(feats, state.classifier, use_localization=True)


def _precompute_reps(state: _TrainState, ids, by_id) -> Dict[str, np.ndarray]:
    model = state.model()
    reps = model.representations([by_id[i] for i in ids])
    return {i: reps[p] for p, i in enumerate(ids)}


def _stage3(state: _TrainState, train_ids, by_id,
            reps_by_id: Dict[str, np.ndarray], report: TrainReport) -> None:
    cfg = state.cfg
    rng = _rng(report.seed, 3)
    labels_by_id = {i: by_id[i].labels for i in train_ids}
    n_per_epoch = cfg.stage3_triplets_per_epoch or len(train_ids)
    curve: List[float] = []
    slot_cache = {i: [Tensor(reps_by_id[i][a])
                      for a in range(state.schema.attribute_count)]
                  for i in train_ids}
    for epoch in range(cfg.epochs_stage3):
        triplets = sample_global_triplets(labels_by_id, state.schema,
                                          n_per_epoch, rng)
        losses = []
        for lo in range(0, len(triplets), cfg.batch_size):
            chunk = triplets[lo:lo + cfg.batch_size]
            losses.append(_stage3_step(state, chunk, slot_cache))
        curve.append(float(np.mean(losses)))
    report.curves["stage3"] = {"global": curve}


def _stage3_step(state: _TrainState, chunk: Sequence[GlobalTriplet],
                 slot_cache) -> float:
    cfg = state.cfg
    tape = GradientTape()
    params: Dict[str, Tensor] = dict(state.global_params.tensors)
    memory = state.memory
    if state.variant.memory_trainable:
        params["memory/matrix"] = memory.matrix
    tape.register_parameters(params)
    terms = []
    for trip in chunk:
        t = memory.indicator(trip.attribute, trip.value)
        g_vec = retrieve(memory, t, tape=tape)
        fq = compose(slot_cache[trip.query_id], (trip.attribute, g_vec),
                     state.global_params, tape=tape)
        fp = compose(slot_cache[trip.positive_id], None, state.global_params,
                     project_as=trip.attribute, tape=tape)
        fn = compose(slot_cache[trip.negative_id], None, state.global_params,
                     project_as=trip.attribute, tape=tape)
        terms.append(global_loss(fq, fp, fn, tape=tape))
    loss = scale(add_n(terms, tape=tape), 1.0 / max(len(terms), 1), tape=tape)
    grads = tape.backward(loss)
    updated = sgd_step(params, grads.by_name, cfg.learning_rate)
    state.global_params = state.global_params.with_tensors(updated)
    if state.variant.memory_trainable:
        state.memory = memory.with_matrix(updated["memory/matrix"])
    return loss.item()


# ---------------------------------------------------------------------------
# entry points
# ---------------------------------------------------------------------------

def train(data, variant: VariantConfig | str, seed: int,
          config: TrainConfig = TrainConfig()) -> Tuple[Model, TrainReport]:
    """Run the staged schedule for one variant and seed.

    ``data`` is a dataset directory or an in-memory
    (schema, images, split) triple. Deterministic: identical inputs give
    byte-identical models in single-threaded runs.
    """
    if isinstance(variant, str):
        variant = VariantConfig.from_name(variant)
    schema, by_id, ds = _load(data)
    train_ids = list(ds.train)
    if not train_ids:
        raise UsageError("train split is empty")

    report = TrainReport(seed=seed, variant=variant.name,
                         config=config.to_json_dict())
    report.notes.append(
        f"decided defaults (not stated by the method description): batch "
        f"size {config.batch_size}, one triplet per anchor per attribute, "
        f"importance weights start at 1.0, projections start as scaled "
        f"gaussians")
    state = _TrainState(schema, config, variant, seed)
    state.backbone = state.backbone.with_channel_means(
        _channel_means([by_id[i] for i in train_ids]))

    t0 = time.perf_counter()
    _stage1(state, train_ids, by_id, report)
    report.stage_seconds["stage1"] = time.perf_counter() - t0

    if variant.use_triplet and config.epochs_stage2 > 0:
        t0 = time.perf_counter()
        _stage2(state, train_ids, by_id, report)
        report.stage_seconds["stage2"] = time.perf_counter() - t0

    reps_by_id = _precompute_reps(state, train_ids, by_id)
    mem = build_memory(schema, [(by_id[i].labels, reps_by_id[i])
                                for i in train_ids])
    state.memory = unfreeze(mem) if variant.memory_trainable else mem

    if variant.use_global_training and config.epochs_stage3 > 0:
        t0 = time.perf_counter()
        _stage3(state, train_ids, by_id, reps_by_id, report)
        report.stage_seconds["stage3"] = time.perf_counter() - t0

    model = state.model()
    if config.evaluate_after and ds.query and ds.gallery:
        index = index_gallery([by_id[i] for i in ds.gallery], model)
        report.evaluation = evaluate(index, model,
                                     [by_id[i] for i in ds.query],
                                     config.eval_ks)
    return model, report


@dataclass
class AblationCell:
    mean: float
    spread: float       # population standard deviation over seeds
    values: Tuple[float, ...]


@dataclass
class AblationTable:
    variants: Tuple[str, ...]
    ks: Tuple[int, ...]
    attribute_names: Tuple[str, ...]
    cells: Dict[Tuple[str, int, str], AblationCell]  # (variant, k, attr|avg)

    def mean_avg(self, variant: str, k: int) -> float:
        return self.cells[(variant, k, "avg")].mean


def ablation_run(data, variants: Sequence[str], ks: Sequence[int],
                 seeds: Sequence[int], config: TrainConfig = TrainConfig(),
                 out_dir=None) -> AblationTable:
    """Train every (variant, seed), evaluate at each K, aggregate
    mean +/- spread per cell. Checkpoints and indices are saved under
    ``out_dir`` when given."""
    if not variants:
        raise UsageError("ablation_run: need at least one variant")
    ordered = [v for v in VARIANT_LADDER if v in set(variants)]
    extras = [v for v in variants if v not in VARIANT_LADDER]
    if extras:
        raise UsageError(f"unknown variants: {extras}")
    schema, by_id, ds = _load(data)
    cfg = replace(config, evaluate_after=False)
    raw: Dict[Tuple[str, int, str], List[float]] = {}
    attr_names: Tuple[str, ...] = ()
    for vname in ordered:
        for seed in seeds:
            model, _ = train(data, vname, seed, cfg)
            tag = ""
            root = None
            if out_dir is not None:
                root = Path(out_dir)
                root.mkdir(parents=True, exist_ok=True)
                tag = model.save(root / f"{vname}_seed{seed}.ckpt")
            index = index_gallery([by_id[i] for i in ds.gallery], model,
                                  version_tag=tag)
            table = evaluate(index, model, [by_id[i] for i in ds.query], ks)
            attr_names = table.attribute_names
            if root is not None:
                from .engine import save_index
                save_index(root / f"{vname}_seed{seed}.index", index)
            for k in table.ks:
                for name in list(table.attribute_names) + ["avg"]:
                    raw.setdefault((vname, k, name), []).append(
                        table.accuracy[k][name])
    cells = {}
    for key, values in raw.items():
        arr = np.array(values, dtype=np.float64)
        cells[key] = AblationCell(mean=float(arr.mean()),
                                  spread=float(arr.std()),
                                  values=tuple(float(v) for v in values))
    return AblationTable(variants=tuple(ordered),
                         ks=tuple(sorted(int(k) for k in ks)),
                         attribute_names=attr_names, cells=cells)


def ablation_table_csv(table: AblationTable, k: int) -> str:
    import csv as _csv
    import io as _io
    buf = _io.StringIO()
    writer = _csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant"] + list(table.attribute_names) + ["avg"])
    for v in table.variants:
        row = [v]
        for name in list(table.attribute_names) + ["avg"]:
            cell = table.cells[(v, k, name)]
            row.append(f"{cell.mean:.4f}±{cell.spread:.4f}")
        writer.writerow(row)
    return buf.getvalue()
