"""Read-only HTTP facade over a trained checkpoint and gallery index.

Serves the schema, the manipulation-query endpoint, activation-map
explainability (PNG heatmap + box JSON), and thumbnails. The snapshot is
immutable after startup; retraining means restarting with a new
checkpoint. Errors use {"error": {"code", "message", "field"?}}.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel

from .engine import GalleryIndex, load_index, query_from_reps
from .localization import compute_aam, export_aam, render_heatmap_png, threshold_bbox
from .model import Model, checkpoint_tag, load_model
from .synthgen import DatasetSplit, LabeledImage, load_dataset

THUMBNAIL_SIZE = 96


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str,
                 field: Optional[str] = None):
        self.status = status
        self.code = code
        self.message = message
        self.field = field
        super().__init__(message)

    def body(self) -> dict:
        err = {"code": self.code, "message": self.message}
        if self.field is not None:
            err["field"] = self.field
        return {"error": err}


@dataclass
class ServiceState:
    model: Model
    index: GalleryIndex
    images: Dict[str, LabeledImage]
    split: Optional[DatasetSplit]

    def __post_init__(self):
        self._rep_cache: Dict[str, np.ndarray] = {}

    def representations(self, image_id: str) -> np.ndarray:
        if image_id not in self._rep_cache:
            self._rep_cache[image_id] = self.model.representations(
                self.images[image_id])
        return self._rep_cache[image_id]


def load_service_state(checkpoint_path, index_path, data_dir) -> ServiceState:
    model = load_model(checkpoint_path)
    index = load_index(index_path)
    tag = checkpoint_tag(checkpoint_path)
    if index.version_tag != tag:
        raise ServiceError(
            500, "version_mismatch",
            f"index was built from checkpoint {index.version_tag!r}, "
            f"got {tag!r}")
    schema, images, split = load_dataset(data_dir)
    if schema.canonical_json() != model.schema.canonical_json():
        raise ServiceError(500, "schema_mismatch",
                           "dataset schema differs from checkpoint schema")
    return ServiceState(model=model, index=index,
                        images={im.id: im for im in images}, split=split)


class QueryRequest(BaseModel):
    query_id: str
    attribute: str
    value: str
    k: int = 10


def create_app(state: ServiceState, ui_dir=None) -> FastAPI:
    app = FastAPI(title="attrsearch", docs_url=None, redoc_url=None)
    schema = state.model.schema
    gallery_pos = {gid: i for i, gid in enumerate(state.index.ids)}

    @app.exception_handler(ServiceError)
    async def _service_error(_req: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content=exc.body())

    @app.exception_handler(RequestValidationError)
    async def _validation_error(_req: Request, exc: RequestValidationError):
        first = exc.errors()[0] if exc.errors() else {}
        field = ".".join(str(p) for p in first.get("loc", []) if p != "body")
        return JSONResponse(status_code=422, content={
            "error": {"code": "invalid_request",
                      "message": first.get("msg", "invalid request"),
                      "field": field or None}})

    @app.get("/schema")
    def get_schema():
        return json.loads(schema.canonical_json())

    @app.get("/images")
    def list_images(split: str = "query"):
        if state.split is None and split != "all":
            raise ServiceError(404, "no_split",
                               "dataset has no split information")
        if split == "all":
            ids = sorted(state.images)
        elif split in ("train", "query", "gallery"):
            ids = list(getattr(state.split, split))
        else:
            raise ServiceError(422, "invalid_split",
                               f"unknown split {split!r}", field="split")
        return {"split": split,
                "images": [{"id": i, "labels": list(state.images[i].labels)}
                           for i in ids]}

    @app.post("/query")
    def post_query(body: QueryRequest):
        if body.k < 1:
            raise ServiceError(422, "invalid_k", "k must be >= 1", field="k")
        image = state.images.get(body.query_id)
        if image is None:
            raise ServiceError(404, "unknown_image",
                               f"no image {body.query_id!r}", field="query_id")
        try:
            a = schema.attribute_index(body.attribute)
        except KeyError:
            raise ServiceError(422, "unknown_attribute",
                               f"attribute {body.attribute!r} not in schema",
                               field="attribute")
        values = schema.values(a)
        if body.value not in values:
            raise ServiceError(422, "unknown_value",
                               f"value {body.value!r} not valid for "
                               f"{body.attribute!r}", field="value")
        v = values.index(body.value)
        if image.labels[a] == v:
            raise ServiceError(422, "value_unchanged",
                               "manipulation target equals the image's "
                               "current value", field="value")
        reps = state.representations(body.query_id)
        result = query_from_reps(state.index, state.model, reps,
                                 image.labels, (a, v), body.k)
        return {
            "manipulated_attribute": body.attribute,
            "target_labels": list(result.target_labels),
            "results": [
                {"id": rid, "distance": dist,
                 "labels": list(map(int, state.index.labels[gallery_pos[rid]])),
                 "hit": hit}
                for rid, dist, hit in zip(result.ids, result.distances,
                                          result.hits)],
        }

    def _image_or_404(image_id: str) -> LabeledImage:
        image = state.images.get(image_id)
        if image is None:
            raise ServiceError(404, "unknown_image", f"no image {image_id!r}")
        return image

    def _attribute_or_404(name: str) -> int:
        try:
            return schema.attribute_index(name)
        except KeyError:
            raise ServiceError(404, "unknown_attribute",
                               f"attribute {name!r} not in schema")

    @app.get("/aam/{image_id}/{attribute}/box")
    def aam_box(image_id: str, attribute: str):
        image = _image_or_404(image_id)
        a = _attribute_or_404(attribute)
        feats = state.model.features(image)
        record, _ = export_aam(feats, state.model.classifier, a,
                               image.pixels.shape[0])
        return record

    @app.get("/aam/{image_id}/{attribute}")
    def aam_png(image_id: str, attribute: str):
        image = _image_or_404(image_id)
        a = _attribute_or_404(attribute)
        feats = state.model.features(image)
        aam = compute_aam(feats, state.model.classifier, a)
        png = render_heatmap_png(aam, image.pixels.shape[0],
                                 image.pixels.shape[1])
        return Response(content=png, media_type="image/png")

    @app.get("/gallery/{image_id}/thumbnail")
    def thumbnail(image_id: str):
        image = _image_or_404(image_id)
        arr = np.round(image.pixels.array * 255.0).astype(np.uint8)
        pil = Image.fromarray(arr, mode="RGB").resize(
            (THUMBNAIL_SIZE, THUMBNAIL_SIZE), Image.BILINEAR)
        buf = io.BytesIO()
        pil.save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    if ui_dir is not None and Path(ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True),
                  name="ui")
    return app
