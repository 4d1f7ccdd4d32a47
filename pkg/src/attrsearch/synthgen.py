"""Deterministic synthetic dataset with spatially localized attributes.

Each image is a colored canvas with a glyph in the top third, a glyph in
the bottom third, and a stripe texture in the middle band, so that three of
the four attributes have a designated spatial region and one (body color)
is global. That gives the localization machinery a discoverable signal
without any real-world data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from PIL import Image

from .numerics import Tensor


class SynthgenError(ValueError):
    pass


@dataclass(frozen=True)
class AttributeSchema:
    """Ordered attributes, each with an ordered list of value names."""

    attributes: Tuple[Tuple[str, Tuple[str, ...]], ...]

    def __post_init__(self):
        if len(self.attributes) < 2:
            raise SynthgenError("schema needs at least 2 attributes")
        for name, values in self.attributes:
            if len(values) < 2:
                raise SynthgenError(f"attribute {name!r} needs >= 2 values")
            if len(set(values)) != len(values):
                raise SynthgenError(f"attribute {name!r} has duplicate values")
        names = [n for n, _ in self.attributes]
        if len(set(names)) != len(names):
            raise SynthgenError("duplicate attribute names")

    @property
    def attribute_count(self) -> int:
        return len(self.attributes)

    @property
    def total_value_count(self) -> int:
        return sum(len(v) for _, v in self.attributes)

    def attribute_names(self) -> List[str]:
        return [n for n, _ in self.attributes]

    def values(self, attribute: int) -> Tuple[str, ...]:
        return self.attributes[attribute][1]

    def value_counts(self) -> List[int]:
        return [len(v) for _, v in self.attributes]

    def attribute_index(self, name: str) -> int:
        for i, (n, _) in enumerate(self.attributes):
            if n == name:
                return i
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {"attributes": [{"name": n, "values": list(v)}
                               for n, v in self.attributes]}

    def canonical_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True,
                          separators=(",", ":"))

    @classmethod
    def from_json_dict(cls, doc: dict) -> "AttributeSchema":
        return cls(tuple((a["name"], tuple(a["values"]))
                         for a in doc["attributes"]))


@dataclass(frozen=True)
class LabeledImage:
    id: str
    pixels: Tensor                  # H x W x 3 floats in [0, 1]
    labels: Tuple[int, ...]         # one value index per attribute


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[str, ...]
    query: Tuple[str, ...]
    gallery: Tuple[str, ...]

    def __post_init__(self):
        parts = [set(self.train), set(self.query), set(self.gallery)]
        total = sum(len(p) for p in parts)
        if len(parts[0] | parts[1] | parts[2]) != total:
            raise SynthgenError("split parts overlap")


DEFAULT_IMAGE_SIZE = 64
NOISE_SIGMA = 0.02
GLYPH_JITTER = 2

_BODY_COLORS = {
    "red": (0.62, 0.18, 0.18),
    "green": (0.18, 0.55, 0.22),
    "blue": (0.18, 0.28, 0.62),
    "gold": (0.65, 0.55, 0.15),
}
_GLYPH_COLOR = (0.95, 0.95, 0.95)
# subtle on purpose: the texture attribute carries less signal than the
# others, so attribute representations differ in reliability and learned
# importance weighting has something real to balance
_STRIPE_FACTOR = 0.70
# distinct vocabularies per band, the way real attribute values are
# visually distinct between attributes (collar styles vs sleeve styles);
# all shapes are filled so they survive the backbone's 8x downsampling
_TOP_SHAPES = ("square", "circle", "triangle", "cross")
_BOTTOM_SHAPES = ("diamond", "halfdisk", "vbars", "wedge")
_PATTERNS = ("plain", "hstripes", "vstripes", "checker")


def default_schema() -> AttributeSchema:
    return AttributeSchema((
        ("body-color", tuple(_BODY_COLORS)),
        ("top-shape", _TOP_SHAPES),
        ("bottom-shape", _BOTTOM_SHAPES),
        ("pattern", _PATTERNS),
    ))


def band_rows(size: int) -> Tuple[int, int]:
    """(first row of the middle band, first row of the bottom band)."""
    return size // 3, 2 * size // 3


def _glyph_mask(shape: str, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    c = (side - 1) / 2.0
    bar = max(side // 4, 2)
    if shape == "square":
        return np.ones((side, side), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= c * c
    if shape == "triangle":
        # upward triangle: row y spans columns within y/2 of the center
        return np.abs(xx - c) * 2 <= yy
    if shape == "cross":
        return (np.abs(yy - c) < bar / 2 + 0.5) | (np.abs(xx - c) < bar / 2 + 0.5)
    if shape == "diamond":
        return np.abs(yy - c) + np.abs(xx - c) <= c
    if shape == "halfdisk":
        return ((yy - c) ** 2 + (xx - c) ** 2 <= c * c) & (yy >= c)
    if shape == "vbars":
        return (xx < side // 3) | (xx >= side - side // 3)
    if shape == "wedge":
        # downward triangle
        return np.abs(xx - c) * 2 <= (side - 1 - yy)
    raise SynthgenError(f"unknown glyph shape {shape!r}")


def render_image(schema: AttributeSchema, labels: Sequence[int],
                 rng: np.random.Generator, size: int = DEFAULT_IMAGE_SIZE,
                 noise_sigma: float = NOISE_SIGMA,
                 jitter: int = GLYPH_JITTER) -> Tensor:
    """Render one image from its labels.

    Nuisance randomness (noise field, glyph jitters) is drawn from ``rng``
    in a fixed order that does not depend on the label values, so renders
    that share an rng state and differ in one localized attribute differ
    only inside that attribute's band.
    """
    labels = validate_labels(schema, labels)
    noise = rng.normal(0.0, noise_sigma, (size, size, 3))
    jit_top = rng.integers(-jitter, jitter + 1, size=2)
    jit_bottom = rng.integers(-jitter, jitter + 1, size=2)

    names = schema.attribute_names()
    body = schema.values(names.index("body-color"))[labels[names.index("body-color")]]
    top = schema.values(names.index("top-shape"))[labels[names.index("top-shape")]]
    bottom = schema.values(names.index("bottom-shape"))[labels[names.index("bottom-shape")]]
    pattern = schema.values(names.index("pattern"))[labels[names.index("pattern")]]

    img = np.empty((size, size, 3), dtype=np.float64)
    img[...] = _BODY_COLORS[body]

    mid0, bot0 = band_rows(size)

    # stripe texture lives strictly inside the middle band
    if pattern != "plain":
        rows = np.arange(mid0, bot0)
        cols = np.arange(size)
        if pattern == "hstripes":
            mask = (rows % 6 < 3)[:, None] & np.ones(size, dtype=bool)[None, :]
        elif pattern == "vstripes":
            mask = np.ones(len(rows), dtype=bool)[:, None] & (cols % 6 < 3)[None, :]
        else:  # checker
            mask = ((rows[:, None] // 4) + (cols[None, :] // 4)) % 2 == 0
        img[mid0:bot0][mask] *= _STRIPE_FACTOR

    band_h = mid0              # top band height; bottom band is size - bot0
    side = max(band_h - 2 * jitter - 2, 7)
    _draw_glyph(img, top, 0, band_h, side, jit_top, size)
    _draw_glyph(img, bottom, bot0, size - bot0, side, jit_bottom, size)

    img += noise
    np.clip(img, 0.0, 1.0, out=img)
    # quantize to 8-bit steps so PNG round-trips are exact
    img = np.round(img * 255.0) / 255.0
    return Tensor(img.astype(np.float32))


def _draw_glyph(img, shape, band_start, band_height, side, jit, size):
    mask = _glyph_mask(shape, side)
    r0 = band_start + (band_height - side) // 2 + int(jit[0])
    c0 = (size - side) // 2 + int(jit[1])
    r0 = min(max(r0, band_start), band_start + band_height - side)
    c0 = min(max(c0, 0), size - side)
    region = img[r0:r0 + side, c0:c0 + side]
    region[mask] = _GLYPH_COLOR


def validate_labels(schema: AttributeSchema, labels: Sequence[int]) -> Tuple[int, ...]:
    labels = tuple(int(v) for v in labels)
    if len(labels) != schema.attribute_count:
        raise SynthgenError(f"expected {schema.attribute_count} labels, "
                            f"got {len(labels)}")
    for a, v in enumerate(labels):
        if not 0 <= v < len(schema.values(a)):
            raise SynthgenError(f"label {v} out of range for attribute "
                                f"{schema.attributes[a][0]!r}")
    return labels


def _image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def generate_dataset(schema: AttributeSchema, n: int, seed: int,
                     size: int = DEFAULT_IMAGE_SIZE,
                     correlated: bool = False) -> List[LabeledImage]:
    """n labeled images, byte-identical for identical (schema, n, seed).

    Labels are sampled independently and uniformly per attribute; with
    ``correlated=True`` the last attribute copies the first attribute's
    value index half the time (for feature-fusion experiments).
    """
    if n < 1:
        raise SynthgenError(f"n must be >= 1, got {n}")
    images = []
    counts = schema.value_counts()
    for i in range(n):
        rng = _image_rng(seed, i)
        labels = [int(rng.integers(0, c)) for c in counts]
        if correlated and rng.random() < 0.5:
            labels[-1] = labels[0] % counts[-1]
        pixels = render_image(schema, labels, rng, size=size)
        images.append(LabeledImage(id=f"img{i:05d}", pixels=pixels,
                                   labels=tuple(labels)))
    return images


def split(dataset: Sequence[LabeledImage], n_query: int, n_gallery: int,
          seed: int) -> DatasetSplit:
    """Seeded shuffle, then partition into query / gallery / train."""
    if n_query < 0 or n_gallery < 0 or n_query + n_gallery >= len(dataset):
        raise SynthgenError(
            f"split sizes {n_query}+{n_gallery} must leave a nonempty train "
            f"set out of {len(dataset)} images")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed])))
    ids = [im.id for im in dataset]
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        query=tuple(shuffled[:n_query]),
        gallery=tuple(shuffled[n_query:n_query + n_gallery]),
        train=tuple(shuffled[n_query + n_gallery:]),
    )


def manipulations_available(query: LabeledImage,
                            gallery_labels: Iterable[Sequence[int]]
                            ) -> List[Tuple[int, int]]:
    """All (attribute, target value) pairs that differ from the query's
    current value and have at least one exact post-manipulation match in
    the gallery."""
    present = {tuple(lab) for lab in gallery_labels}
    if not present:
        raise SynthgenError("gallery is empty")
    out = []
    base = list(query.labels)
    for a, current in enumerate(base):
        n_values = max(max(lab[a] for lab in present) + 1, current + 1)
        for v in range(n_values):
            if v == current:
                continue
            target = list(base)
            target[a] = v
            if tuple(target) in present:
                out.append((a, v))
    return out


# ---------------------------------------------------------------------------
# on-disk layout: schema.json + manifest.jsonl + images/*.png (+ splits.json)
# ---------------------------------------------------------------------------

def save_dataset(directory, images: Sequence[LabeledImage],
                 schema: AttributeSchema,
                 dataset_split: DatasetSplit | None = None) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "schema.json").write_text(schema.canonical_json() + "\n")
    lines = []
    for im in images:
        fname = f"images/{im.id}.png"
        arr = np.round(im.pixels.array * 255.0).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / fname)
        lines.append(json.dumps({"id": im.id, "labels": list(im.labels),
                                 "file": fname}, sort_keys=True))
    (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    if dataset_split is not None:
        (root / "splits.json").write_text(json.dumps(
            {"train": list(dataset_split.train),
             "query": list(dataset_split.query),
             "gallery": list(dataset_split.gallery)}, indent=1) + "\n")


def load_dataset(directory):
    """Returns (schema, images, split-or-None)."""
    root = Path(directory)
    schema = AttributeSchema.from_json_dict(
        json.loads((root / "schema.json").read_text()))
    images = []
    for line in (root / "manifest.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        arr = np.asarray(Image.open(root / rec["file"]).convert("RGB"),
                         dtype=np.float32) / 255.0
        images.append(LabeledImage(id=rec["id"], pixels=Tensor(arr),
                                   labels=tuple(rec["labels"])))
    splits_path = root / "splits.json"
    ds = None
    if splits_path.exists():
        doc = json.loads(splits_path.read_text())
        ds = DatasetSplit(train=tuple(doc["train"]), query=tuple(doc["query"]),
                          gallery=tuple(doc["gallery"]))
    return schema, images, ds
