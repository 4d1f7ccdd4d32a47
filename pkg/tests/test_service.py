import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from attrsearch.engine import index_gallery, query_from_reps, save_index
from attrsearch.localization import compute_aam, threshold_bbox
from attrsearch.service import ServiceState, create_app, load_service_state
from attrsearch.synthgen import save_dataset


@pytest.fixture(scope="module")
def app_state(small_model, small_dataset, small_by_id):
    model, _ = small_model
    _, _, ds = small_dataset
    gallery = [small_by_id[i] for i in ds.gallery]
    index = index_gallery(gallery, model, version_tag="fixture")
    return ServiceState(model=model, index=index, images=dict(small_by_id),
                        split=ds)


@pytest.fixture(scope="module")
def client(app_state):
    return TestClient(create_app(app_state), raise_server_exceptions=False)


def _query_case(state):
    image_id = state.split.query[0]
    image = state.images[image_id]
    schema = state.model.schema
    a = 0
    v = (image.labels[a] + 1) % len(schema.values(a))
    return image_id, schema.attributes[a][0], schema.values(a)[v], a, v


# ---------------------------------------------------------------------------
# /schema
# ---------------------------------------------------------------------------

def test_schema_lists_attributes_in_order(client, small_dataset):
    schema, _, _ = small_dataset
    body = client.get("/schema").json()
    assert [a["name"] for a in body["attributes"]] == schema.attribute_names()
    assert len(body["attributes"]) == 4


def test_schema_matches_dataset_file_after_canonicalization(
        client, small_dataset, tmp_path):
    schema, images, ds = small_dataset
    save_dataset(tmp_path, images[:1], schema)
    served = json.dumps(client.get("/schema").json(), sort_keys=True,
                        separators=(",", ":"))
    on_disk = json.dumps(json.loads((tmp_path / "schema.json").read_text()),
                         sort_keys=True, separators=(",", ":"))
    assert served == on_disk


def test_schema_value_order_matches_memory_rows(client, app_state):
    body = client.get("/schema").json()
    row_index = app_state.model.memory.row_index
    row = 0
    for a, attr in enumerate(body["attributes"]):
        for v in range(len(attr["values"])):
            assert row_index[(a, v)] == row
            row += 1


# ---------------------------------------------------------------------------
# /query
# ---------------------------------------------------------------------------

def test_query_returns_sorted_results(client, app_state):
    image_id, attr, value, _, _ = _query_case(app_state)
    body = client.post("/query", json={
        "query_id": image_id, "attribute": attr, "value": value, "k": 5,
    }).json()
    assert len(body["results"]) == 5
    dists = [r["distance"] for r in body["results"]]
    assert dists == sorted(dists)
    assert body["manipulated_attribute"] == attr
    for r in body["results"]:
        assert set(r) == {"id", "distance", "labels", "hit"}


def test_query_matches_direct_engine_call(client, app_state):
    image_id, attr, value, a, v = _query_case(app_state)
    body = client.post("/query", json={
        "query_id": image_id, "attribute": attr, "value": value, "k": 7,
    }).json()
    reps = app_state.model.representations(app_state.images[image_id])
    direct = query_from_reps(app_state.index, app_state.model, reps,
                             app_state.images[image_id].labels, (a, v), 7)
    assert [r["id"] for r in body["results"]] == list(direct.ids)
    assert [r["hit"] for r in body["results"]] == list(direct.hits)
    assert body["target_labels"] == list(direct.target_labels)


def test_query_unknown_id_404(client):
    r = client.post("/query", json={"query_id": "nope", "attribute":
                                    "body-color", "value": "red", "k": 3})
    assert r.status_code == 404
    assert r.json()["error"]["code"] == "unknown_image"
    assert r.json()["error"]["field"] == "query_id"


def test_query_unknown_attribute_422(client, app_state):
    image_id = app_state.split.query[0]
    r = client.post("/query", json={"query_id": image_id,
                                    "attribute": "sleeve", "value": "x",
                                    "k": 3})
    assert r.status_code == 422
    assert r.json()["error"]["field"] == "attribute"


def test_query_unchanged_value_422(client, app_state):
    image_id = app_state.split.query[0]
    image = app_state.images[image_id]
    schema = app_state.model.schema
    current = schema.values(0)[image.labels[0]]
    r = client.post("/query", json={"query_id": image_id,
                                    "attribute": schema.attributes[0][0],
                                    "value": current, "k": 3})
    assert r.status_code == 422
    assert r.json()["error"]["code"] == "value_unchanged"


def test_query_malformed_body_422(client):
    r = client.post("/query", json={"attribute": "body-color"})
    assert r.status_code == 422
    assert "error" in r.json()


def test_repeated_queries_identical(client, app_state):
    image_id, attr, value, _, _ = _query_case(app_state)
    payload = {"query_id": image_id, "attribute": attr, "value": value,
               "k": 4}
    b1 = client.post("/query", json=payload).content
    b2 = client.post("/query", json=payload).content
    assert b1 == b2


# ---------------------------------------------------------------------------
# /aam
# ---------------------------------------------------------------------------

def test_aam_box_matches_offline_recomputation(client, app_state):
    image_id = app_state.split.query[1]
    attr_name = app_state.model.schema.attributes[1][0]
    body = client.get(f"/aam/{image_id}/{attr_name}/box").json()
    feats = app_state.model.features(app_state.images[image_id])
    box = threshold_bbox(compute_aam(feats, app_state.model.classifier, 1))
    assert body["box"] == {"y1": box.y1, "x1": box.x1,
                           "y2": box.y2, "x2": box.x2}
    assert body["attribute"] == attr_name


def test_aam_png_has_image_dimensions(client, app_state):
    image_id = app_state.split.query[1]
    attr_name = app_state.model.schema.attributes[0][0]
    r = client.get(f"/aam/{image_id}/{attr_name}")
    assert r.status_code == 200
    assert r.headers["content-type"] == "image/png"
    img = Image.open(io.BytesIO(r.content))
    assert img.size == (64, 64)


def test_aam_unknown_image_or_attribute_404(client, app_state):
    image_id = app_state.split.query[0]
    assert client.get("/aam/missing/body-color").status_code == 404
    assert client.get(f"/aam/{image_id}/bogus").status_code == 404


# ---------------------------------------------------------------------------
# /gallery thumbnails and /images
# ---------------------------------------------------------------------------

def test_thumbnail_roundtrip(client, app_state):
    gid = app_state.split.gallery[0]
    r = client.get(f"/gallery/{gid}/thumbnail")
    assert r.status_code == 200
    assert r.headers["content-type"] == "image/png"
    img = Image.open(io.BytesIO(r.content)).convert("RGB")
    assert img.size == (96, 96)
    # the body color class survives thumbnailing: compare the mid-band
    # border pixel against the source color
    src = app_state.images[gid].pixels.array
    thumb = np.asarray(img, dtype=np.float32) / 255.0
    src_corner = src[32, 2]
    thumb_corner = thumb[48, 3]
    assert np.abs(src_corner - thumb_corner).max() < 0.15


def test_thumbnail_unknown_id_404(client):
    assert client.get("/gallery/none/thumbnail").status_code == 404


def test_images_listing(client, app_state):
    body = client.get("/images", params={"split": "query"}).json()
    assert body["split"] == "query"
    assert [rec["id"] for rec in body["images"]] == list(app_state.split.query)
    bad = client.get("/images", params={"split": "junk"})
    assert bad.status_code == 422


# ---------------------------------------------------------------------------
# startup validation
# ---------------------------------------------------------------------------

def test_static_ui_mounted_when_dir_given(app_state, tmp_path):
    ui = tmp_path / "dist"
    ui.mkdir()
    (ui / "index.html").write_text("<!doctype html><title>ui</title>")
    local = TestClient(create_app(app_state, ui_dir=ui))
    r = local.get("/")
    assert r.status_code == 200
    assert "ui" in r.text
    # API routes still win over the static mount
    assert local.get("/schema").status_code == 200


def test_version_mismatch_refused(small_model, small_dataset, small_by_id,
                                  tmp_path):
    from attrsearch.service import ServiceError
    model, _ = small_model
    schema, images, ds = small_dataset
    save_dataset(tmp_path / "data", images, schema, ds)
    ckpt = tmp_path / "m.ckpt"
    model.save(ckpt)
    index = index_gallery([small_by_id[i] for i in ds.gallery[:3]], model,
                          version_tag="stale")
    save_index(tmp_path / "g.idx", index)
    with pytest.raises(ServiceError):
        load_service_state(ckpt, tmp_path / "g.idx", tmp_path / "data")


def test_load_service_state_happy_path(small_model, small_dataset,
                                       small_by_id, tmp_path):
    from attrsearch.model import checkpoint_tag
    model, _ = small_model
    schema, images, ds = small_dataset
    save_dataset(tmp_path / "data", images, schema, ds)
    ckpt = tmp_path / "m.ckpt"
    model.save(ckpt)
    index = index_gallery([small_by_id[i] for i in ds.gallery[:3]], model,
                          version_tag=checkpoint_tag(ckpt))
    save_index(tmp_path / "g.idx", index)
    state = load_service_state(ckpt, tmp_path / "g.idx", tmp_path / "data")
    assert len(state.images) == len(images)
