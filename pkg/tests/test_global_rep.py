import numpy as np
import pytest

from attrsearch import numerics as N
from attrsearch.global_rep import (
    GlobalParams,
    compose,
    global_loss,
    sample_global_triplets,
)
from attrsearch.numerics import GradientTape, Tensor, UsageError
from attrsearch.synthgen import AttributeSchema


def _schema():
    return AttributeSchema((("c", ("r", "g")), ("s", ("a", "b"))))


def _reps(rng, a, d):
    return [Tensor(rng.normal(size=d).astype(np.float32)) for _ in range(a)]


def test_identity_compose_is_concatenation():
    schema = _schema()
    params = GlobalParams.identity(schema, dim=3)
    rng = np.random.default_rng(0)
    reps = _reps(rng, 2, 3)
    out = compose(reps, None, params)
    np.testing.assert_allclose(
        out.vector.array,
        np.concatenate([reps[0].array, reps[1].array]), rtol=1e-6)


def test_identity_compose_with_manipulation_replaces_slot():
    schema = _schema()
    params = GlobalParams.identity(schema, dim=3)
    rng = np.random.default_rng(1)
    reps = _reps(rng, 2, 3)
    g = Tensor(rng.normal(size=3).astype(np.float32))
    out = compose(reps, (1, g), params)
    np.testing.assert_allclose(
        out.vector.array, np.concatenate([reps[0].array, g.array]), rtol=1e-6)
    assert out.manipulated_attribute == 1


def test_compose_matches_hand_arithmetic():
    schema = _schema()
    rng = np.random.default_rng(2)
    lam = rng.normal(size=2).astype(np.float32)
    w = rng.normal(size=(6, 2)).astype(np.float32)
    params = GlobalParams(schema, {
        "global/lambda": Tensor(lam),
        "global/proj/c": Tensor(w),
        "global/proj/s": Tensor(rng.normal(size=(6, 2)).astype(np.float32)),
    }, dim=3, r=2, shared=False)
    reps = _reps(rng, 2, 3)
    out = compose(reps, None, params, project_as=0)
    merged = np.concatenate([lam[0] * reps[0].array, lam[1] * reps[1].array])
    np.testing.assert_allclose(out.vector.array, merged @ w, rtol=1e-5)


def test_compose_validates_slot_count_and_g_length():
    schema = _schema()
    params = GlobalParams.identity(schema, dim=3)
    rng = np.random.default_rng(3)
    with pytest.raises(UsageError):
        compose(_reps(rng, 1, 3), None, params)
    with pytest.raises(Exception):
        compose(_reps(rng, 2, 3), (0, Tensor(np.zeros(5, np.float32))), params)


def test_per_attribute_projection_requires_target():
    schema = _schema()
    params = GlobalParams.init(schema, dim=3, r=2, seed=0)
    rng = np.random.default_rng(4)
    with pytest.raises(UsageError):
        compose(_reps(rng, 2, 3), None, params)   # no manipulation, no attr


def test_global_loss_values():
    import math
    fq = compose([Tensor([0.0, 0.0]), Tensor([0.0, 0.0])], None,
                 GlobalParams.identity(_schema(), dim=2), project_as=0)
    fp = fq
    ln3 = math.log(3.0)
    fn_vec = np.zeros(4, dtype=np.float32)
    fn_vec[0] = ln3
    from attrsearch.global_rep import GlobalRepresentation
    fn = GlobalRepresentation(vector=Tensor(fn_vec))
    loss = global_loss(fq, fp, fn)
    assert loss.item() == pytest.approx(0.25, abs=1e-5)
    # equidistant triple
    fe = GlobalRepresentation(vector=Tensor(np.zeros(4, np.float32)))
    assert global_loss(fe, fe, fe).item() == pytest.approx(0.5)


def test_lambda_gradient_matches_finite_differences():
    schema = _schema()
    rng = np.random.default_rng(5)
    reps_q = rng.normal(size=(2, 3))
    reps_p = rng.normal(size=(2, 3))
    reps_n = rng.normal(size=(2, 3))
    g_row = rng.normal(size=(3,))
    params = {
        "lambda": np.ones(2),
        "proj": rng.normal(size=(6, 2)) * 0.6,
    }

    def loss_fn(p, tape):
        def build(rep_rows, manip):
            slots = [Tensor(rep_rows[a], dtype=np.float64) for a in range(2)]
            if manip is not None:
                slots[manip] = Tensor(g_row, dtype=np.float64)
            merged = N.weighted_concat(slots, p["lambda"], tape=tape)
            return N.matmul(merged, p["proj"], tape=tape)

        fq = build(reps_q, 1)
        fp = build(reps_p, None)
        fn = build(reps_n, None)
        from attrsearch.heads import soft_triplet
        d_plus, _ = soft_triplet(fq, fp, fn, tape=tape)
        return d_plus

    for name in ("lambda", "proj"):
        err = N.finite_difference_check(loss_fn, params, name, epsilon=1e-5)
        assert err < 1e-4, f"{name}: {err}"


def test_reparameterization_identity():
    """Scaling one importance weight while dividing that attribute's block
    of every projection by the same constant leaves F unchanged."""
    schema = _schema()
    rng = np.random.default_rng(6)
    d, r = 3, 2
    lam = np.array([1.3, 0.7], dtype=np.float32)
    w = rng.normal(size=(2 * d, r)).astype(np.float32)
    reps = _reps(rng, 2, d)
    c = 2.5
    lam2 = lam.copy()
    lam2[0] *= c
    w2 = w.copy()
    w2[:d] /= c

    def build(lam_arr, w_arr):
        params = GlobalParams(schema, {
            "global/lambda": Tensor(lam_arr),
            "global/proj/shared": Tensor(w_arr)}, dim=d, r=r, shared=True)
        return compose(reps, None, params, project_as=0).vector.array

    np.testing.assert_allclose(build(lam, w), build(lam2, w2),
                               rtol=1e-5, atol=1e-5)


def test_slot_replacement_reduces_distance_to_matching_gallery():
    """With identity composition, replacing the manipulated slot with the
    target prototype moves the query strictly closer to a gallery image
    that has the target value and identical other slots."""
    schema = _schema()
    params = GlobalParams.identity(schema, dim=4)
    rng = np.random.default_rng(7)
    shared = Tensor(rng.normal(size=4).astype(np.float32))
    query_slot = Tensor(rng.normal(size=4).astype(np.float32))
    target_proto = Tensor(rng.normal(size=4).astype(np.float32))
    gallery_slot = Tensor((target_proto.array +
                           rng.normal(size=4).astype(np.float32) * 0.05))
    f_gallery = compose([shared, gallery_slot], None, params).vector.array
    f_plain = compose([shared, query_slot], None, params).vector.array
    f_replaced = compose([shared, query_slot], (1, target_proto),
                         params).vector.array
    d_plain = np.linalg.norm(f_plain - f_gallery)
    d_replaced = np.linalg.norm(f_replaced - f_gallery)
    assert d_replaced < d_plain


def test_sample_global_triplets_positive_property():
    rng = np.random.default_rng(8)
    schema = _schema()
    labels_by_id = {f"i{k}": (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
                    for k in range(40)}
    triplets = sample_global_triplets(labels_by_id, schema, 200, 3)
    for t in triplets:
        q = list(labels_by_id[t.query_id])
        assert labels_by_id[t.query_id][t.attribute] != t.value
        q[t.attribute] = t.value
        assert tuple(q) == tuple(labels_by_id[t.positive_id])
        assert tuple(labels_by_id[t.negative_id]) != tuple(q)


def test_sample_global_triplets_deterministic():
    labels_by_id = {f"i{k}": (k % 2, (k // 2) % 2) for k in range(20)}
    schema = _schema()
    t1 = sample_global_triplets(labels_by_id, schema, 50, 9)
    t2 = sample_global_triplets(labels_by_id, schema, 50, 9)
    assert t1 == t2


def test_manipulated_attribute_frequency_near_uniform():
    rng = np.random.default_rng(10)
    schema = _schema()
    labels_by_id = {f"i{k}": (int(rng.integers(0, 2)), int(rng.integers(0, 2)))
                    for k in range(200)}
    triplets = sample_global_triplets(labels_by_id, schema, 1000, 11)
    counts = np.zeros(2)
    for t in triplets:
        counts[t.attribute] += 1
    freq = counts / counts.sum()
    np.testing.assert_allclose(freq, 0.5, atol=0.1)   # +/-20% of uniform
