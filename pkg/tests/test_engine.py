import numpy as np
import pytest

from attrsearch.engine import (
    evaluate,
    eval_table_csv,
    index_gallery,
    load_index,
    query,
    query_from_reps,
    save_index,
)
from attrsearch.global_rep import compose
from attrsearch.memory import retrieve
from attrsearch.numerics import Tensor, UsageError
from attrsearch.synthgen import manipulations_available


@pytest.fixture(scope="module")
def indexed(small_model, small_dataset, small_by_id):
    model, _ = small_model
    _, _, ds = small_dataset
    gallery = [small_by_id[i] for i in ds.gallery]
    index = index_gallery(gallery, model, version_tag="t0")
    return model, index, gallery


def test_empty_gallery_gives_empty_index(small_model):
    model, _ = small_model
    index = index_gallery([], model)
    assert len(index) == 0


def test_indexing_twice_is_byte_identical(indexed, small_by_id,
                                          small_dataset, tmp_path):
    model, index, gallery = indexed
    again = index_gallery(gallery, model, version_tag="t0")
    p1, p2 = tmp_path / "a.idx", tmp_path / "b.idx"
    save_index(p1, index)
    save_index(p2, again)
    assert p1.read_bytes() == p2.read_bytes()
    assert (p1.parent / (p1.name + ".json")).read_bytes() == \
        (p2.parent / (p2.name + ".json")).read_bytes()


def test_stored_projection_matches_recomputation(indexed):
    model, index, gallery = indexed
    rng = np.random.default_rng(0)
    for _ in range(5):
        i = int(rng.integers(0, len(gallery)))
        a = int(rng.integers(0, model.schema.attribute_count))
        reps = model.representations(gallery[i])
        slots = [Tensor(reps[j]) for j in range(model.schema.attribute_count)]
        recomputed = compose(slots, None, model.global_params,
                             project_as=a).vector.array
        np.testing.assert_allclose(index.projected[i, a], recomputed,
                                   rtol=1e-5, atol=1e-6)


def test_query_k0_is_empty(indexed, small_by_id, small_dataset):
    model, index, _ = indexed
    _, _, ds = small_dataset
    image = small_by_id[ds.query[0]]
    a = 0
    v = (image.labels[a] + 1) % len(model.schema.values(a))
    result = query(index, model, image, (a, v), 0)
    assert result.ids == ()
    assert result.distances == ()


def test_single_image_gallery_always_rank_one(small_model, small_by_id,
                                              small_dataset):
    model, _ = small_model
    _, _, ds = small_dataset
    gallery = [small_by_id[ds.gallery[0]]]
    index = index_gallery(gallery, model)
    image = small_by_id[ds.query[0]]
    a = 1
    v = (image.labels[a] + 1) % len(model.schema.values(a))
    result = query(index, model, image, (a, v), 5)
    assert result.ids == (gallery[0].id,)


def test_ranking_matches_exhaustive_sort(indexed, small_by_id, small_dataset):
    model, index, gallery = indexed
    _, _, ds = small_dataset
    rng = np.random.default_rng(1)
    for qi in range(10):
        image = small_by_id[ds.query[qi]]
        a = int(rng.integers(0, model.schema.attribute_count))
        v = int((image.labels[a] + 1 + rng.integers(
            0, len(model.schema.values(a)) - 1)) % len(model.schema.values(a)))
        if v == image.labels[a]:
            v = (v + 1) % len(model.schema.values(a))
        k = 20
        result = query(index, model, image, (a, v), k)
        # independent oracle: recompute the query vector and fully sort
        reps = model.representations(image)
        t = model.memory.indicator(a, v)
        g = retrieve(model.memory, t)
        slots = [Tensor(reps[j]) for j in range(model.schema.attribute_count)]
        fq = compose(slots, (a, g), model.global_params).vector.array
        diff = index.projected[:, a, :].astype(np.float64) - fq.astype(np.float64)
        dists = (diff ** 2).sum(axis=1)
        order = sorted(range(len(gallery)),
                       key=lambda i: (dists[i], index.ids[i]))
        assert list(result.ids) == [index.ids[i] for i in order[:k]]
        assert list(result.distances) == pytest.approx(
            [float(dists[i]) for i in order[:k]], rel=1e-6)
        assert all(result.distances[i] <= result.distances[i + 1]
                   for i in range(len(result.distances) - 1))


def test_query_rejects_current_value(indexed, small_by_id, small_dataset):
    model, index, _ = indexed
    _, _, ds = small_dataset
    image = small_by_id[ds.query[0]]
    with pytest.raises(UsageError):
        query(index, model, image, (0, image.labels[0]), 5)


def test_inserted_exact_vector_ranks_first(indexed, small_by_id,
                                           small_dataset):
    from attrsearch.engine import GalleryIndex
    model, index, gallery = indexed
    _, _, ds = small_dataset
    image = small_by_id[ds.query[1]]
    a = 0
    v = (image.labels[a] + 1) % len(model.schema.values(a))
    reps = model.representations(image)
    fq = None
    t = model.memory.indicator(a, v)
    g = retrieve(model.memory, t)
    slots = [Tensor(reps[j]) for j in range(model.schema.attribute_count)]
    fq = compose(slots, (a, g), model.global_params).vector.array
    projected = index.projected.copy()
    synthetic = projected[:1].copy()
    synthetic[0, a] = fq
    new_index = GalleryIndex(
        ids=("aaa_synthetic",) + index.ids,
        labels=np.vstack([index.labels[:1], index.labels]),
        reps=np.vstack([index.reps[:1], index.reps]),
        projected=np.vstack([synthetic, projected]),
        version_tag="t0")
    result = query_from_reps(new_index, model, reps, image.labels, (a, v), 3)
    assert result.ids[0] == "aaa_synthetic"
    assert result.distances[0] == 0.0


# ---------------------------------------------------------------------------
# evaluation harness
# ---------------------------------------------------------------------------

def test_hit_requires_all_attributes_to_match(indexed, small_by_id,
                                              small_dataset):
    model, index, gallery = indexed
    _, _, ds = small_dataset
    image = small_by_id[ds.query[2]]
    avail = manipulations_available(image, [g.labels for g in gallery])
    if not avail:
        pytest.skip("query has no available manipulation in this gallery")
    a, v = avail[0]
    result = query(index, model, image, (a, v), len(gallery))
    target = list(image.labels)
    target[a] = v
    for rid, hit in zip(result.ids, result.hits):
        g_labels = gallery[index.ids.index(rid)].labels
        assert hit == (tuple(g_labels) == tuple(target))
        if g_labels[a] == v and tuple(g_labels) != tuple(target):
            assert not hit     # manipulated value alone is not a hit


def test_evaluate_matches_recount_oracle(indexed, small_by_id, small_dataset):
    model, index, gallery = indexed
    _, _, ds = small_dataset
    queries = [small_by_id[i] for i in ds.query[:12]]
    ks = (5, 10)
    table = evaluate(index, model, queries, ks)
    # independent recount from raw ranked lists
    gallery_labels = [g.labels for g in gallery]
    names = model.schema.attribute_names()
    hits = {k: np.zeros(len(names)) for k in ks}
    counts = np.zeros(len(names))
    for im in queries:
        for a, v in manipulations_available(im, gallery_labels):
            result = query(index, model, im, (a, v), max(ks))
            counts[a] += 1
            target = list(im.labels)
            target[a] = v
            for k in ks:
                got = [gallery[index.ids.index(r)].labels
                       for r in result.ids[:k]]
                if any(tuple(lab) == tuple(target) for lab in got):
                    hits[k][a] += 1
    for k in ks:
        for a, name in enumerate(names):
            expected = hits[k][a] / counts[a] if counts[a] else 0.0
            assert table.accuracy[k][name] == pytest.approx(expected)
        assert table.accuracy[k]["avg"] == pytest.approx(
            np.mean([table.accuracy[k][n] for n in names]))
    assert table.counts == {n: int(counts[a]) for a, n in enumerate(names)}


def test_topk_accuracy_nondecreasing_in_k(indexed, small_by_id, small_dataset):
    model, index, _ = indexed
    _, _, ds = small_dataset
    queries = [small_by_id[i] for i in ds.query[:15]]
    table = evaluate(index, model, queries, (10, 20, 30))
    for name in list(table.attribute_names) + ["avg"]:
        assert table.accuracy[10][name] <= table.accuracy[20][name] \
            <= table.accuracy[30][name]


def test_eval_table_csv_shape(indexed, small_by_id, small_dataset):
    model, index, _ = indexed
    _, _, ds = small_dataset
    table = evaluate(index, model, [small_by_id[ds.query[0]]], (5,))
    lines = eval_table_csv(table).strip().splitlines()
    header = lines[0].split(",")
    assert header[0] == "k"
    assert header[-1] == "avg"
    assert header[1:-1] == list(model.schema.attribute_names())


def test_index_round_trip(indexed, tmp_path):
    _, index, _ = indexed
    path = tmp_path / "gallery.idx"
    save_index(path, index)
    loaded = load_index(path)
    assert loaded.ids == index.ids
    np.testing.assert_array_equal(loaded.labels, index.labels)
    np.testing.assert_array_equal(loaded.reps, index.reps)
    np.testing.assert_array_equal(loaded.projected, index.projected)
    assert loaded.version_tag == index.version_tag
