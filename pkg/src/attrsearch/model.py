"""The trained model bundle: every component plus variant flags, with
checkpoint serialization (binary tensors + JSON sidecar)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .backbone import BackboneConfig, BackboneParams, FeatureMaps, extract_features, stack_pixels
from .global_rep import GlobalParams
from .heads import ROI_POOL_SIZE, HeadBank, attribute_representation
from .localization import GapClassifier, attribute_boxes
from .memory import MemoryBlock
from .numerics import Tensor, UsageError, load_tensors, save_tensors
from .synthgen import AttributeSchema


@dataclass
class Model:
    schema: AttributeSchema
    backbone: BackboneParams
    classifier: GapClassifier
    heads: HeadBank
    memory: Optional[MemoryBlock]
    global_params: GlobalParams
    use_localization: bool = True
    variant: str = "Full"

    def features(self, images, tape=None) -> FeatureMaps:
        """Feature maps for one LabeledImage / pixel tensor or a list."""
        if isinstance(images, (list, tuple)):
            return extract_features(stack_pixels(images), self.backbone, tape=tape)
        pixels = images.pixels if hasattr(images, "pixels") else images
        return extract_features(pixels, self.backbone, tape=tape)

    def boxes(self, features: FeatureMaps) -> np.ndarray:
        return attribute_boxes(features, self.classifier,
                               use_localization=self.use_localization)

    def representations(self, images, chunk: int = 64) -> np.ndarray:
        """(A, D) stack for one image or (N, A, D) for a list; inference
        only (no tape, no dropout). Long lists run in chunks to bound the
        conv workspace."""
        single = not isinstance(images, (list, tuple))
        items = [images] if single else list(images)
        a_count = self.schema.attribute_count
        out = np.empty((len(items), a_count, self.heads.dim), dtype=np.float32)
        for lo in range(0, len(items), chunk):
            part = items[lo:lo + chunk]
            feats = self.features(part)
            boxes = self.boxes(feats)
            for a in range(a_count):
                rep = attribute_representation(feats, boxes[:, a], self.heads, a)
                out[lo:lo + len(part), a] = rep.array
        return out[0] if single else out

    # -- serialization -------------------------------------------------------

    def checkpoint_tensors(self) -> Dict[str, Tensor]:
        tensors: Dict[str, Tensor] = {}
        tensors.update(self.backbone.tensors)
        tensors["backbone/channel_means"] = Tensor(self.backbone.channel_means)
        tensors.update(self.classifier.tensors)
        tensors.update(self.heads.tensors)
        if self.memory is not None:
            tensors["memory/matrix"] = self.memory.matrix
        tensors.update(self.global_params.tensors)
        return tensors

    def sidecar(self) -> dict:
        doc = {
            "schema": self.schema.to_json_dict(),
            "backbone": self.backbone.config.to_json_dict(),
            "heads": {"hidden": self.heads.hidden, "dim": self.heads.dim,
                      "fusion": self.heads.fusion},
            "global": {"r": self.global_params.r,
                       "shared": self.global_params.shared},
            "use_localization": self.use_localization,
            "variant": self.variant,
        }
        if self.memory is not None:
            doc["memory"] = {"trainable": self.memory.trainable,
                             "row_index": self.memory.row_index_json()}
        return doc

    def save(self, path) -> str:
        """Write <path> (binary tensors) and <path>.json; returns the
        checkpoint's content hash (the snapshot version tag)."""
        path = Path(path)
        save_tensors(path, self.checkpoint_tensors())
        tag = checkpoint_tag(path)
        doc = self.sidecar()
        doc["checkpoint_tag"] = tag
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return tag


def checkpoint_tag(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def load_model(path) -> Model:
    path = Path(path)
    doc = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arrays = load_tensors(path)
    schema = AttributeSchema.from_json_dict(doc["schema"])
    config = BackboneConfig.from_json_dict(doc["backbone"])

    def take(name: str) -> Tensor:
        if name not in arrays:
            raise UsageError(f"checkpoint {path} is missing tensor {name!r}")
        return Tensor(arrays[name])

    backbone_tensors = {}
    for i in range(len(config.layers)):
        backbone_tensors[f"backbone/conv{i}/kernel"] = take(f"backbone/conv{i}/kernel")
        backbone_tensors[f"backbone/conv{i}/bias"] = take(f"backbone/conv{i}/bias")
    backbone = BackboneParams(
        config=config, tensors=backbone_tensors,
        channel_means=arrays["backbone/channel_means"],
        trainable=tuple(True for _ in config.layers))

    classifier = GapClassifier(schema, {
        f"gap/{name}": take(f"gap/{name}") for name, _ in schema.attributes})

    hcfg = doc["heads"]
    head_tensors = {}
    for name, _ in schema.attributes:
        for leaf in ("fc1/weight", "fc1/bias", "fc2/weight", "fc2/bias",
                     "classifier"):
            head_tensors[f"head/{name}/{leaf}"] = take(f"head/{name}/{leaf}")
    mid_channels = config.layers[config.mid_layer].channels
    pooled = ROI_POOL_SIZE * ROI_POOL_SIZE * mid_channels
    heads = HeadBank(schema, head_tensors, pooled, hcfg["hidden"], hcfg["dim"],
                     hcfg["fusion"])

    memory = None
    if "memory" in doc:
        memory = MemoryBlock(schema, take("memory/matrix"),
                             trainable=doc["memory"]["trainable"])

    gcfg = doc["global"]
    gtensors = {"global/lambda": take("global/lambda")}
    if gcfg["shared"]:
        gtensors["global/proj/shared"] = take("global/proj/shared")
    else:
        for name, _ in schema.attributes:
            gtensors[f"global/proj/{name}"] = take(f"global/proj/{name}")
    global_params = GlobalParams(schema, gtensors, hcfg["dim"], gcfg["r"],
                                 gcfg["shared"])

    return Model(schema=schema, backbone=backbone, classifier=classifier,
                 heads=heads, memory=memory, global_params=global_params,
                 use_localization=doc["use_localization"],
                 variant=doc.get("variant", "Full"))
